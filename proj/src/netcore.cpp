#include "segcomp/netcore.hpp"

#include <cmath>
#include <cstring>

#include "segcomp/error.hpp"

namespace segcomp {

namespace {

constexpr uint64_t kInitStream = 0x696e6974;

void he_uniform(Param& p, size_t n, int fan_in, Rng& rng) {
    p.init(n);
    const double bound = std::sqrt(6.0 / fan_in);
    for (double& x : p.v) x = (2.0 * rng.next_double() - 1.0) * bound;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

SegModel SegModel::zeros(const SegModelDims& dims) {
    SegModel m;
    m.dims = dims;
    const int hid = dims.hidden, in = dims.in_dim, k = dims.num_classes;
    m.conv1_w.init(static_cast<size_t>(hid) * in);
    m.conv1_b.init(hid);
    m.conv2_w.init(static_cast<size_t>(hid) * hid * 9);
    m.conv2_b.init(hid);
    m.head_w.init(static_cast<size_t>(k) * hid);
    m.head_b.init(k);
    m.br1_w.init(static_cast<size_t>(kBranchWidth) * hid);
    m.bn_gamma.init(kBranchWidth);
    m.bn_beta.init(kBranchWidth);
    m.br2_w.init(kBranchWidth);
    m.br2_b.init(1);
    m.bn_rmean.assign(kBranchWidth, 0.0);
    m.bn_rvar.assign(kBranchWidth, 1.0);
    return m;
}

SegModel SegModel::init(const SegModelDims& dims, uint64_t seed, double dropout_rate) {
    if (dims.in_dim < 1 || dims.hidden < 1 || dims.num_classes < 2)
        throw ConfigError("invalid model dimensions");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("dropout rate must lie in [0, 1)");
    SegModel m = zeros(dims);
    m.dropout_rate = dropout_rate;
    Rng rng(derive_seed(seed, kInitStream));
    const int hid = dims.hidden, in = dims.in_dim, k = dims.num_classes;
    he_uniform(m.conv1_w, static_cast<size_t>(hid) * in, in, rng);
    he_uniform(m.conv2_w, static_cast<size_t>(hid) * hid * 9, hid * 9, rng);
    he_uniform(m.head_w, static_cast<size_t>(k) * hid, hid, rng);
    he_uniform(m.br1_w, static_cast<size_t>(kBranchWidth) * hid, hid, rng);
    he_uniform(m.br2_w, kBranchWidth, kBranchWidth, rng);
    for (double& x : m.bn_gamma.v) x = 1.0;
    return m;
}

std::vector<ParamRef> SegModel::params() {
    return {
        {"conv1.w", &conv1_w}, {"conv1.b", &conv1_b}, {"conv2.w", &conv2_w},
        {"conv2.b", &conv2_b}, {"head.w", &head_w},   {"head.b", &head_b},
        {"br1.w", &br1_w},     {"bn.gamma", &bn_gamma},
        {"bn.beta", &bn_beta}, {"br2.w", &br2_w},     {"br2.b", &br2_b},
    };
}

void SegModel::zero_grad() {
    for (auto& [name, p] : params()) std::fill(p->g.begin(), p->g.end(), 0.0);
}

void SegModel::check_finite(const std::string& context) const {
    auto scan = [&](const char* name, const std::vector<double>& xs) {
        for (double x : xs)
            if (!std::isfinite(x))
                throw NumericError(context + ": non-finite value in parameter group " + name);
    };
    scan("conv1.w", conv1_w.v);
    scan("conv1.b", conv1_b.v);
    scan("conv2.w", conv2_w.v);
    scan("conv2.b", conv2_b.v);
    scan("head.w", head_w.v);
    scan("head.b", head_b.v);
    scan("br1.w", br1_w.v);
    scan("bn.gamma", bn_gamma.v);
    scan("bn.beta", bn_beta.v);
    scan("br2.w", br2_w.v);
    scan("br2.b", br2_b.v);
    scan("bn.running_mean", bn_rmean);
    scan("bn.running_var", bn_rvar);
}

namespace {

// y[p][o] = b[o] + sum_i w[o*in + i] * x[p][i]; b may be null (conv feeding
// a batchnorm carries no bias)
void pointwise_forward(const Grid3& x, const std::vector<double>& w,
                       const std::vector<double>* b, int out_ch, Grid3& y) {
    const int in_ch = x.c;
    y = Grid3(x.h, x.w, out_ch);
    const size_t n = x.pixels();
    for (size_t p = 0; p < n; ++p) {
        const double* xi = x.v.data() + p * in_ch;
        double* yo = y.v.data() + p * out_ch;
        for (int o = 0; o < out_ch; ++o) {
            double acc = b ? (*b)[o] : 0.0;
            const double* wr = w.data() + static_cast<size_t>(o) * in_ch;
            for (int i = 0; i < in_ch; ++i) acc += wr[i] * xi[i];
            yo[o] = acc;
        }
    }
}

void pointwise_backward(const Grid3& x, const std::vector<double>& w, int out_ch,
                        const Grid3& dy, std::vector<double>& dw, std::vector<double>* db,
                        Grid3* dx) {
    const int in_ch = x.c;
    const size_t n = x.pixels();
    for (size_t p = 0; p < n; ++p) {
        const double* xi = x.v.data() + p * in_ch;
        const double* dyo = dy.v.data() + p * out_ch;
        double* dxi = dx ? dx->v.data() + p * in_ch : nullptr;
        for (int o = 0; o < out_ch; ++o) {
            const double d = dyo[o];
            if (d == 0.0) continue;
            if (db) (*db)[o] += d;
            double* dwr = dw.data() + static_cast<size_t>(o) * in_ch;
            const double* wr = w.data() + static_cast<size_t>(o) * in_ch;
            for (int i = 0; i < in_ch; ++i) {
                dwr[i] += d * xi[i];
                if (dxi) dxi[i] += d * wr[i];
            }
        }
    }
}

// 3x3 convolution with zero padding, weight layout [out][in][ky][kx].
void conv3x3_forward(const Grid3& x, const std::vector<double>& w,
                     const std::vector<double>& b, int out_ch, Grid3& y) {
    const int h = x.h, wd = x.w, in_ch = x.c;
    y = Grid3(h, wd, out_ch);
    for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < wd; ++xx) {
            double* yo = y.px(yy, xx);
            for (int o = 0; o < out_ch; ++o) yo[o] = b[o];
            for (int ky = -1; ky <= 1; ++ky) {
                const int sy = yy + ky;
                if (sy < 0 || sy >= h) continue;
                for (int kx = -1; kx <= 1; ++kx) {
                    const int sx = xx + kx;
                    if (sx < 0 || sx >= wd) continue;
                    const double* xi = x.px(sy, sx);
                    const size_t koff = static_cast<size_t>((ky + 1) * 3 + (kx + 1));
                    for (int o = 0; o < out_ch; ++o) {
                        const double* wr = w.data() + ((static_cast<size_t>(o) * in_ch) * 9) + koff;
                        double acc = 0.0;
                        for (int i = 0; i < in_ch; ++i) acc += wr[static_cast<size_t>(i) * 9] * xi[i];
                        yo[o] += acc;
                    }
                }
            }
        }
    }
}

void conv3x3_backward(const Grid3& x, const std::vector<double>& w, int out_ch,
                      const Grid3& dy, std::vector<double>& dw, std::vector<double>& db,
                      Grid3& dx) {
    const int h = x.h, wd = x.w, in_ch = x.c;
    for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < wd; ++xx) {
            const double* dyo = dy.px(yy, xx);
            for (int o = 0; o < out_ch; ++o) db[o] += dyo[o];
            for (int ky = -1; ky <= 1; ++ky) {
                const int sy = yy + ky;
                if (sy < 0 || sy >= h) continue;
                for (int kx = -1; kx <= 1; ++kx) {
                    const int sx = xx + kx;
                    if (sx < 0 || sx >= wd) continue;
                    const double* xi = x.px(sy, sx);
                    double* dxi = dx.px(sy, sx);
                    const size_t koff = static_cast<size_t>((ky + 1) * 3 + (kx + 1));
                    for (int o = 0; o < out_ch; ++o) {
                        const double d = dyo[o];
                        if (d == 0.0) continue;
                        const size_t base = (static_cast<size_t>(o) * in_ch) * 9 + koff;
                        for (int i = 0; i < in_ch; ++i) {
                            dw[base + static_cast<size_t>(i) * 9] += d * xi[i];
                            dxi[i] += d * w[base + static_cast<size_t>(i) * 9];
                        }
                    }
                }
            }
        }
    }
}

void relu_dropout(Grid3& a, const FwdOpts& opts, double rate, std::vector<uint8_t>& mask,
                  Grid3& out) {
    out = a;
    for (double& x : out.v) x = x > 0.0 ? x : 0.0;
    if (opts.dropout && rate > 0.0) {
        if (opts.rng == nullptr) throw ConfigError("dropout requires an rng");
        mask.resize(out.v.size());
        const double keep = 1.0 - rate;
        for (size_t i = 0; i < out.v.size(); ++i) {
            mask[i] = opts.rng->next_double() >= rate ? 1 : 0;
            out.v[i] = mask[i] ? out.v[i] / keep : 0.0;
        }
    } else {
        mask.clear();
    }
}

}  // namespace

ForwardResult forward_ex(SegModel& model, const FeatureGrid& features, const FwdOpts& opts,
                         ForwardCache* cache) {
    if (features.c != model.dims.in_dim)
        throw DataError("feature dimension " + std::to_string(features.c) +
                        " does not match model input " + std::to_string(model.dims.in_dim));
    if (features.h < 1 || features.w < 1) throw DataError("empty feature grid");

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c = ForwardCache{};
    c.opts = opts;
    c.h = features.h;
    c.w = features.w;
    c.input = features;

    const int hid = model.dims.hidden, k = model.dims.num_classes;
    pointwise_forward(features, model.conv1_w.v, &model.conv1_b.v, hid, c.a1);
    relu_dropout(c.a1, opts, model.dropout_rate, c.mask1, c.r1);
    conv3x3_forward(c.r1, model.conv2_w.v, model.conv2_b.v, hid, c.a2);
    relu_dropout(c.a2, opts, model.dropout_rate, c.mask2, c.hidden);

    pointwise_forward(c.hidden, model.head_w.v, &model.head_b.v, k, c.logits);

    // uncertainty branch
    pointwise_forward(c.hidden, model.br1_w.v, nullptr, kBranchWidth, c.br1);
    const size_t n = c.br1.pixels();
    c.bn_mean.assign(kBranchWidth, 0.0);
    c.bn_var.assign(kBranchWidth, 0.0);
    if (opts.batch_stats) {
        for (size_t p = 0; p < n; ++p) {
            const double* row = c.br1.v.data() + p * kBranchWidth;
            for (int ch = 0; ch < kBranchWidth; ++ch) c.bn_mean[ch] += row[ch];
        }
        for (int ch = 0; ch < kBranchWidth; ++ch) c.bn_mean[ch] /= static_cast<double>(n);
        for (size_t p = 0; p < n; ++p) {
            const double* row = c.br1.v.data() + p * kBranchWidth;
            for (int ch = 0; ch < kBranchWidth; ++ch) {
                const double d = row[ch] - c.bn_mean[ch];
                c.bn_var[ch] += d * d;
            }
        }
        for (int ch = 0; ch < kBranchWidth; ++ch) c.bn_var[ch] /= static_cast<double>(n);
        if (opts.update_running) {
            const double m = model.bn_momentum;
            for (int ch = 0; ch < kBranchWidth; ++ch) {
                model.bn_rmean[ch] = (1.0 - m) * model.bn_rmean[ch] + m * c.bn_mean[ch];
                model.bn_rvar[ch] = (1.0 - m) * model.bn_rvar[ch] + m * c.bn_var[ch];
            }
        }
    } else {
        c.bn_mean = model.bn_rmean;
        c.bn_var = model.bn_rvar;
    }
    c.bn_xhat = Grid3(c.h, c.w, kBranchWidth);
    std::vector<double> inv_sd(kBranchWidth);
    for (int ch = 0; ch < kBranchWidth; ++ch)
        inv_sd[ch] = 1.0 / std::sqrt(c.bn_var[ch] + model.bn_eps);
    for (size_t p = 0; p < n; ++p) {
        const double* row = c.br1.v.data() + p * kBranchWidth;
        double* xh = c.bn_xhat.v.data() + p * kBranchWidth;
        for (int ch = 0; ch < kBranchWidth; ++ch)
            xh[ch] = (row[ch] - c.bn_mean[ch]) * inv_sd[ch];
    }

    c.br2 = Grid2(c.h, c.w);
    c.beta = Grid2(c.h, c.w);
    for (size_t p = 0; p < n; ++p) {
        const double* xh = c.bn_xhat.v.data() + p * kBranchWidth;
        double acc = model.br2_b.v[0];
        for (int ch = 0; ch < kBranchWidth; ++ch)
            acc += model.br2_w.v[ch] * (model.bn_gamma.v[ch] * xh[ch] + model.bn_beta.v[ch]);
        c.br2.v[p] = acc;
        c.beta.v[p] = sigmoid(acc);
    }

    return ForwardResult{c.logits, c.beta, c.hidden};
}

ForwardResult forward(SegModel& model, const FeatureGrid& features, Mode mode, Rng* rng,
                      ForwardCache* cache) {
    FwdOpts opts = FwdOpts::for_mode(mode, rng);
    opts.dropout = opts.dropout && model.dropout_rate > 0.0;
    return forward_ex(model, features, opts, cache);
}

void backward(SegModel& model, const ForwardCache& cache, const Grid3& d_logits,
              const Grid2* d_beta, const Grid3* d_hidden_extra) {
    if (!cache.opts.batch_stats)
        throw NumericError("backward requires a batch-statistics forward cache");
    const int hid = model.dims.hidden, k = model.dims.num_classes;
    const size_t n = cache.hidden.pixels();

    Grid3 d_hidden(cache.h, cache.w, hid);
    if (d_hidden_extra) d_hidden.v = d_hidden_extra->v;

    // classifier head
    pointwise_backward(cache.hidden, model.head_w.v, k, d_logits, model.head_w.g,
                       &model.head_b.g, &d_hidden);

    if (d_beta) {
        // sigmoid + final branch conv
        Grid2 ds(cache.h, cache.w);
        for (size_t p = 0; p < n; ++p) {
            const double b = cache.beta.v[p];
            ds.v[p] = d_beta->v[p] * b * (1.0 - b);
        }
        Grid3 d_bnout(cache.h, cache.w, kBranchWidth);
        for (size_t p = 0; p < n; ++p) {
            const double d = ds.v[p];
            const double* xh = cache.bn_xhat.v.data() + p * kBranchWidth;
            double* dout = d_bnout.v.data() + p * kBranchWidth;
            model.br2_b.g[0] += d;
            for (int ch = 0; ch < kBranchWidth; ++ch) {
                const double bn_out =
                    model.bn_gamma.v[ch] * xh[ch] + model.bn_beta.v[ch];
                model.br2_w.g[ch] += d * bn_out;
                dout[ch] = d * model.br2_w.v[ch];
            }
        }

        // batchnorm backward through the batch statistics
        std::vector<double> sum_dy(kBranchWidth, 0.0), sum_dy_xhat(kBranchWidth, 0.0);
        for (size_t p = 0; p < n; ++p) {
            const double* dout = d_bnout.v.data() + p * kBranchWidth;
            const double* xh = cache.bn_xhat.v.data() + p * kBranchWidth;
            for (int ch = 0; ch < kBranchWidth; ++ch) {
                sum_dy[ch] += dout[ch];
                sum_dy_xhat[ch] += dout[ch] * xh[ch];
            }
        }
        for (int ch = 0; ch < kBranchWidth; ++ch) {
            model.bn_gamma.g[ch] += sum_dy_xhat[ch];
            model.bn_beta.g[ch] += sum_dy[ch];
        }
        Grid3 d_br1(cache.h, cache.w, kBranchWidth);
        std::vector<double> inv_sd(kBranchWidth);
        for (int ch = 0; ch < kBranchWidth; ++ch)
            inv_sd[ch] = 1.0 / std::sqrt(cache.bn_var[ch] + model.bn_eps);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (size_t p = 0; p < n; ++p) {
            const double* dout = d_bnout.v.data() + p * kBranchWidth;
            const double* xh = cache.bn_xhat.v.data() + p * kBranchWidth;
            double* dbr = d_br1.v.data() + p * kBranchWidth;
            for (int ch = 0; ch < kBranchWidth; ++ch) {
                const double dxhat = dout[ch] * model.bn_gamma.v[ch];
                dbr[ch] = inv_sd[ch] * (dxhat - inv_n * sum_dy[ch] * model.bn_gamma.v[ch] -
                                        xh[ch] * inv_n * sum_dy_xhat[ch] * model.bn_gamma.v[ch]);
            }
        }

        pointwise_backward(cache.hidden, model.br1_w.v, kBranchWidth, d_br1, model.br1_w.g,
                           nullptr, &d_hidden);
    }

    // trunk, layer 2
    Grid3 d_a2 = d_hidden;
    if (!cache.mask2.empty()) {
        const double keep = 1.0 - model.dropout_rate;
        for (size_t i = 0; i < d_a2.v.size(); ++i)
            d_a2.v[i] = cache.mask2[i] ? d_a2.v[i] / keep : 0.0;
    }
    for (size_t i = 0; i < d_a2.v.size(); ++i)
        if (cache.a2.v[i] <= 0.0) d_a2.v[i] = 0.0;

    Grid3 d_r1(cache.h, cache.w, hid);
    conv3x3_backward(cache.r1, model.conv2_w.v, hid, d_a2, model.conv2_w.g, model.conv2_b.g,
                     d_r1);

    // trunk, layer 1
    Grid3& d_a1 = d_r1;
    if (!cache.mask1.empty()) {
        const double keep = 1.0 - model.dropout_rate;
        for (size_t i = 0; i < d_a1.v.size(); ++i)
            d_a1.v[i] = cache.mask1[i] ? d_a1.v[i] / keep : 0.0;
    }
    for (size_t i = 0; i < d_a1.v.size(); ++i)
        if (cache.a1.v[i] <= 0.0) d_a1.v[i] = 0.0;

    pointwise_backward(cache.input, model.conv1_w.v, hid, d_a1, model.conv1_w.g,
                       &model.conv1_b.g, nullptr);
}

}  // namespace segcomp
