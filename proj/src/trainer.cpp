#include "segcomp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "segcomp/error.hpp"
#include "segcomp/metrics.hpp"

namespace segcomp {

namespace {

struct LossSetup {
    LossKind kind = LossKind::plain;
    double alpha = 0.0;
    bool beta_one = false;
    CompensationMatrix* comp = nullptr;  // compensated only
    TransitionHead* head = nullptr;      // s/c-model only
};

double safe_neg_log(double p, const char* what) {
    if (!(p > 0.0)) throw NumericError(std::string(what) + " underflowed to zero");
    return -std::log(p);
}

// dL/dlogits for a plain softmax cross-entropy pixel: (p - onehot) * scale.
void plain_ce_pixel(const double* logits, int k, int gt, double scale, double& ce,
                    double* d_logits, std::vector<double>& scratch) {
    std::span<double> probs(scratch.data(), k);
    plain_probabilities(std::span<const double>(logits, k), probs);
    ce += safe_neg_log(probs[gt], "class probability");
    if (d_logits)
        for (int i = 0; i < k; ++i)
            d_logits[i] += (probs[i] - (i == gt ? 1.0 : 0.0)) * scale;
}

// softmax jacobian transpose: dl_i = p_i * (dp_i - sum_j p_j dp_j)
void softmax_backward(std::span<const double> p, std::span<const double> dp,
                      std::span<double> dl_accum) {
    double dot = 0.0;
    for (size_t i = 0; i < p.size(); ++i) dot += p[i] * dp[i];
    for (size_t i = 0; i < p.size(); ++i) dl_accum[i] += p[i] * (dp[i] - dot);
}

// Mean over the given images of the per-image pixel-mean loss. When
// want_grad, parameter gradients are accumulated into model/comp/head.
LossBreakdown batch_loss(SegModel& model, const LossSetup& setup, const Dataset& ds,
                         std::span<const int> indices, const FwdOpts& base_opts,
                         Rng* dropout_rng, bool want_grad) {
    const int k = model.dims.num_classes;
    const double img_scale = 1.0 / static_cast<double>(indices.size());

    std::vector<double> b_mat;
    std::vector<double> d_b;
    if (setup.kind == LossKind::compensated) {
        b_mat = setup.comp->materialize();
        if (want_grad) d_b.assign(b_mat.size(), 0.0);
    }
    std::vector<double> t_shared, d_t_shared;
    if (setup.kind == LossKind::s_model) {
        t_shared = s_model_matrix(*setup.head);
        if (want_grad) d_t_shared.assign(t_shared.size(), 0.0);
    }

    LossBreakdown total;
    total.alpha = setup.alpha;
    std::vector<double> scratch(k), probs(k), pbar(k), dpbar(k), dp(k);

    for (int idx : indices) {
        const FeatureGrid& feats = ds.features[idx];
        const LabelGrid& labels = ds.labels[idx];
        FwdOpts opts = base_opts;
        opts.rng = dropout_rng;
        ForwardCache cache;
        ForwardResult fr = forward_ex(model, feats, opts, &cache);
        const size_t n = fr.logits.pixels();
        const double px_scale = img_scale / static_cast<double>(n);

        Grid3 d_logits(feats.h, feats.w, k);
        Grid2 d_beta(feats.h, feats.w);
        Grid3 d_hidden;
        bool use_beta_grad = false, use_hidden_grad = false;

        switch (setup.kind) {
            case LossKind::plain: {
                double ce = 0.0;
                for (size_t p = 0; p < n; ++p) {
                    const int gt = labels.v[p];
                    if (gt < 0 || gt >= k) throw DataError("label out of range");
                    plain_ce_pixel(fr.logits.v.data() + p * k, k, gt, px_scale, ce,
                                   want_grad ? d_logits.v.data() + p * k : nullptr, scratch);
                }
                // same operation order as the compensated path so a zero B
                // is bit-identical to this baseline
                ce *= 1.0 / static_cast<double>(n);
                total.cross_entropy += ce * img_scale;
                break;
            }
            case LossKind::compensated: {
                const BetaGrid* betas = &fr.beta;
                BetaGrid ones;
                if (setup.beta_one) {
                    ones = BetaGrid(feats.h, feats.w, 1.0);
                    betas = &ones;
                }
                LossBreakdown lb;
                if (want_grad) {
                    lb = training_loss_backward(fr.logits, *betas, labels, b_mat, k,
                                                setup.alpha, img_scale, d_logits, d_beta,
                                                d_b);
                    use_beta_grad = !setup.beta_one;
                } else {
                    lb = training_loss(fr.logits, *betas, labels, b_mat, k, setup.alpha);
                }
                total.cross_entropy += lb.cross_entropy * img_scale;
                total.lasso += lb.lasso * img_scale;
                break;
            }
            case LossKind::s_model: {
                double ce = 0.0;
                for (size_t p = 0; p < n; ++p) {
                    const int gt = labels.v[p];
                    if (gt < 0 || gt >= k) throw DataError("label out of range");
                    const double* l = fr.logits.v.data() + p * k;
                    plain_probabilities(std::span<const double>(l, k), probs);
                    for (int i = 0; i < k; ++i) {
                        double acc = 0.0;
                        for (int j = 0; j < k; ++j)
                            acc += t_shared[static_cast<size_t>(i) * k + j] * probs[j];
                        pbar[i] = acc;
                    }
                    ce += safe_neg_log(pbar[gt], "transition probability");
                    if (want_grad) {
                        std::fill(dpbar.begin(), dpbar.end(), 0.0);
                        dpbar[gt] = -px_scale / pbar[gt];
                        transition_backward(t_shared, probs, dpbar, k, d_t_shared, dp);
                        softmax_backward(probs, dp,
                                         std::span<double>(d_logits.v.data() + p * k, k));
                    }
                }
                total.cross_entropy += ce / static_cast<double>(n) * img_scale;
                break;
            }
            case LossKind::c_model: {
                double ce = 0.0;
                if (want_grad) d_hidden = Grid3(feats.h, feats.w, model.dims.hidden);
                std::vector<double> reduced, d_t(static_cast<size_t>(k) * k),
                    d_raw(static_cast<size_t>(k) * k);
                for (size_t p = 0; p < n; ++p) {
                    const int gt = labels.v[p];
                    if (gt < 0 || gt >= k) throw DataError("label out of range");
                    const double* l = fr.logits.v.data() + p * k;
                    const double* hx = fr.hidden.v.data() + p * model.dims.hidden;
                    plain_probabilities(std::span<const double>(l, k), probs);
                    const auto t_px = c_model_matrix(
                        *setup.head,
                        std::span<const double>(hx, model.dims.hidden), &reduced);
                    for (int i = 0; i < k; ++i) {
                        double acc = 0.0;
                        for (int j = 0; j < k; ++j)
                            acc += t_px[static_cast<size_t>(i) * k + j] * probs[j];
                        pbar[i] = acc;
                    }
                    ce += safe_neg_log(pbar[gt], "transition probability");
                    if (want_grad) {
                        std::fill(dpbar.begin(), dpbar.end(), 0.0);
                        dpbar[gt] = -px_scale / pbar[gt];
                        std::fill(d_t.begin(), d_t.end(), 0.0);
                        transition_backward(t_px, probs, dpbar, k, d_t, dp);
                        softmax_backward(probs, dp,
                                         std::span<double>(d_logits.v.data() + p * k, k));
                        std::fill(d_raw.begin(), d_raw.end(), 0.0);
                        column_softmax_backward(t_px, d_t, k, d_raw);
                        c_branch_backward(
                            *setup.head, std::span<const double>(hx, model.dims.hidden),
                            reduced, d_raw,
                            std::span<double>(d_hidden.v.data() + p * model.dims.hidden,
                                              model.dims.hidden));
                    }
                }
                use_hidden_grad = want_grad;
                total.cross_entropy += ce / static_cast<double>(n) * img_scale;
                break;
            }
        }

        if (want_grad)
            backward(model, cache, d_logits, use_beta_grad ? &d_beta : nullptr,
                     use_hidden_grad ? &d_hidden : nullptr);
    }

    if (want_grad) {
        if (setup.kind == LossKind::compensated) setup.comp->accumulate_grad(d_b);
        if (setup.kind == LossKind::s_model)
            column_softmax_backward(t_shared, d_t_shared, k, setup.head->s_raw.g);
    }
    total.total = total.cross_entropy + total.lasso;
    return total;
}

std::vector<ParamRef> collect_params(SegModel& model, const LossSetup& setup) {
    std::vector<ParamRef> refs = model.params();
    if (setup.kind == LossKind::compensated && setup.comp)
        for (auto& r : setup.comp->params()) refs.push_back(r);
    if ((setup.kind == LossKind::s_model || setup.kind == LossKind::c_model) && setup.head)
        for (auto& r : setup.head->params()) refs.push_back(r);
    return refs;
}

void zero_all(std::vector<ParamRef>& refs) {
    for (auto& [name, p] : refs) std::fill(p->g.begin(), p->g.end(), 0.0);
}

}  // namespace

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (poly_decay_power < 0.0) throw ConfigError("poly_decay_power must be >= 0");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

double poly_lr(double base, int step, int steps, double power) {
    if (power == 0.0) return base;
    return base * std::pow(1.0 - static_cast<double>(step) / steps, power);
}

LossBreakdown compute_batch_gradients(SegModel& model, CompensationMatrix* comp,
                                      TransitionHead* head, const Dataset& batch,
                                      const LossSpec& spec) {
    if (batch.empty()) throw DataError("gradient computation needs at least one image");
    LossSetup setup;
    setup.kind = spec.kind;
    setup.alpha = spec.alpha;
    setup.beta_one = spec.beta_one;
    setup.comp = comp;
    setup.head = head;
    if (setup.kind == LossKind::compensated && comp == nullptr)
        throw ConfigError("compensated loss requires a compensation matrix");
    if ((setup.kind == LossKind::s_model || setup.kind == LossKind::c_model) && head == nullptr)
        throw ConfigError("transition loss requires a head");
    std::vector<ParamRef> refs = model.params();
    if (comp) for (auto& r : comp->params()) refs.push_back(r);
    if (head) for (auto& r : head->params()) refs.push_back(r);
    zero_all(refs);

    FwdOpts opts;
    opts.batch_stats = true;
    opts.dropout = false;
    opts.update_running = false;
    std::vector<int> indices(batch.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    return batch_loss(model, setup, batch, indices, opts, nullptr, true);
}

double mean_model_uncertainty(SegModel& model, const Dataset& ds) {
    if (ds.empty()) throw DataError("dataset is empty");
    const int k = model.dims.num_classes;
    double sum = 0.0;
    size_t count = 0;
    std::vector<double> probs(k);
    for (const auto& feats : ds.features) {
        ForwardResult fr = forward(model, feats, Mode::eval);
        const size_t n = fr.logits.pixels();
        for (size_t p = 0; p < n; ++p) {
            plain_probabilities(std::span<const double>(fr.logits.v.data() + p * k, k), probs);
            sum += 1.0 - *std::max_element(probs.begin(), probs.end());
        }
        count += n;
    }
    return sum / static_cast<double>(count);
}

TrainHistory train(SegModel& model, CompensationMatrix& comp, TransitionHead* head,
                   const Dataset& train_set, const Dataset* eval_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw DataError("training set is empty");
    if (train_set.num_classes != model.dims.num_classes)
        throw DataError("dataset class count does not match model");
    for (const auto& f : train_set.features)
        if (f.c != model.dims.in_dim) throw DataError("feature dim mismatch in dataset");

    LossSetup setup;
    setup.kind = cfg.loss_kind;
    if (setup.kind == LossKind::compensated && !cfg.compensation_enabled)
        setup.kind = LossKind::plain;  // B is never touched below
    setup.alpha = cfg.alpha;
    setup.beta_one = cfg.beta_one;
    setup.comp = &comp;
    setup.head = head;
    if (setup.kind == LossKind::compensated && comp.mode != cfg.comp_mode())
        throw ConfigError("compensation matrix mode does not match config");
    if ((setup.kind == LossKind::s_model || setup.kind == LossKind::c_model) && head == nullptr)
        throw ConfigError("transition-head loss requires a head");

    std::vector<ParamRef> refs = collect_params(model, setup);
    std::vector<std::vector<double>> velocity(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) velocity[i].assign(refs[i].second->size(), 0.0);

    Rng batch_rng(derive_seed(cfg.seed, kBatchStreamTag));
    Rng drop_rng(derive_seed(cfg.seed, kDropoutStreamTag));

    FwdOpts opts;
    opts.batch_stats = true;
    opts.dropout = model.dropout_rate > 0.0;
    opts.update_running = true;

    TrainHistory hist;
    hist.losses.reserve(cfg.steps);
    hist.lr.reserve(cfg.steps);
    std::vector<int> batch(cfg.batch_size);

    for (int step = 0; step < cfg.steps; ++step) {
        const double lr_t = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_decay_power);
        for (int b = 0; b < cfg.batch_size; ++b)
            batch[b] = static_cast<int>(batch_rng.next_below(train_set.size()));

        zero_all(refs);
        LossBreakdown lb;
        try {
            lb = batch_loss(model, setup, train_set, batch, opts, &drop_rng, true);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(lb.total)) {
            model.check_finite("step " + std::to_string(step));
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               " (total=" + std::to_string(lb.total) + ")");
        }

        for (size_t i = 0; i < refs.size(); ++i) {
            Param& p = *refs[i].second;
            std::vector<double>& vel = velocity[i];
            for (size_t j = 0; j < p.v.size(); ++j) {
                vel[j] = cfg.momentum * vel[j] + p.g[j];
                p.v[j] -= lr_t * vel[j];
            }
        }

        hist.losses.push_back(lb);
        hist.lr.push_back(lr_t);

        if (cfg.check_invariants && setup.kind == LossKind::compensated &&
            comp.mode != CompMode::unconstrained) {
            const auto m = comp.materialize();
            const int k = comp.num_classes;
            for (int i = 0; i < k; ++i) {
                if (m[static_cast<size_t>(i) * k + i] != 0.0)
                    throw NumericError("compensation diagonal violated at step " +
                                       std::to_string(step));
                if (comp.mode == CompMode::symmetric)
                    for (int j = 0; j < k; ++j)
                        if (m[static_cast<size_t>(i) * k + j] != m[static_cast<size_t>(j) * k + i])
                            throw NumericError("compensation symmetry violated at step " +
                                               std::to_string(step));
            }
        }

        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            const Dataset& ev = eval_set ? *eval_set : train_set;
            ConfusionMatrix conf(model.dims.num_classes);
            std::vector<double> probs(model.dims.num_classes);
            for (size_t i = 0; i < ev.size(); ++i) {
                ForwardResult fr = forward(model, ev.features[i], Mode::eval);
                LabelGrid pred(fr.logits.h, fr.logits.w);
                const int k = model.dims.num_classes;
                for (size_t p = 0; p < fr.logits.pixels(); ++p) {
                    const double* l = fr.logits.v.data() + p * k;
                    int best = 0;
                    for (int c = 1; c < k; ++c)
                        if (l[c] > l[best]) best = c;
                    pred.v[p] = best;
                }
                conf.add(ev.labels[i], pred);
            }
            EvalSnapshot snap;
            snap.step = step + 1;
            snap.miou = miou(conf);
            snap.acc_a = accuracies(conf).aggregate;
            snap.mean_u = mean_model_uncertainty(model, ev);
            hist.snapshots.push_back(snap);
        }
    }
    return hist;
}

void write_history_csv(const std::filesystem::path& file, const TrainHistory& hist) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "step,total,ce,lasso,lr\n";
    char buf[160];
    for (size_t i = 0; i < hist.losses.size(); ++i) {
        const LossBreakdown& lb = hist.losses[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", i, lb.total,
                      lb.cross_entropy, lb.lasso, hist.lr[i]);
        out << buf;
    }
}

Method method_from_name(std::string_view name) {
    if (name == "baseline") return Method::baseline;
    if (name == "ours") return Method::ours;
    if (name == "ours_sym" || name == "ours+sym") return Method::ours_sym;
    if (name == "logcomp") return Method::logcomp;
    if (name == "s_model") return Method::s_model;
    if (name == "c_model") return Method::c_model;
    if (name == "bnn") return Method::bnn;
    throw ConfigError("unknown method: " + std::string(name));
}

const char* method_name(Method m) {
    switch (m) {
        case Method::baseline: return "baseline";
        case Method::ours: return "ours";
        case Method::ours_sym: return "ours_sym";
        case Method::logcomp: return "logcomp";
        case Method::s_model: return "s_model";
        case Method::c_model: return "c_model";
        case Method::bnn: return "bnn";
    }
    return "?";
}

TrainedMethod train_method(Method m, const Dataset& train_set, const Dataset* eval_set,
                           const TrainConfig& base, const SegModelDims& dims,
                           double bnn_dropout) {
    TrainConfig cfg = base;
    double dropout = 0.0;
    switch (m) {
        case Method::baseline:
            cfg.loss_kind = LossKind::plain;
            cfg.compensation_enabled = false;
            break;
        case Method::ours:
            cfg.loss_kind = LossKind::compensated;
            cfg.compensation_enabled = true;
            cfg.symmetric = false;
            cfg.unconstrained = false;
            break;
        case Method::ours_sym:
            cfg.loss_kind = LossKind::compensated;
            cfg.compensation_enabled = true;
            cfg.symmetric = true;
            cfg.unconstrained = false;
            break;
        case Method::logcomp:
            // naive logit compensation: no constraints, no penalty, beta = 1
            cfg.loss_kind = LossKind::compensated;
            cfg.compensation_enabled = true;
            cfg.symmetric = false;
            cfg.unconstrained = true;
            cfg.alpha = 0.0;
            cfg.beta_one = true;
            break;
        case Method::s_model:
            cfg.loss_kind = LossKind::s_model;
            cfg.compensation_enabled = false;
            break;
        case Method::c_model:
            cfg.loss_kind = LossKind::c_model;
            cfg.compensation_enabled = false;
            break;
        case Method::bnn:
            cfg.loss_kind = LossKind::plain;
            cfg.compensation_enabled = false;
            dropout = bnn_dropout;
            break;
    }

    TrainedMethod out;
    out.method = m;
    out.model = SegModel::init(dims, cfg.seed, dropout);
    out.comp = CompensationMatrix::zeros(dims.num_classes, cfg.comp_mode());
    if (m == Method::s_model) out.head = TransitionHead::make_s_model(dims.num_classes);
    if (m == Method::c_model)
        out.head = TransitionHead::make_c_model(dims.num_classes, dims.hidden, cfg.seed);
    out.history = train(out.model, out.comp, out.head ? &*out.head : nullptr, train_set,
                        eval_set, cfg);
    return out;
}

FdReport finite_difference_check(SegModel& model, CompensationMatrix* comp,
                                 TransitionHead* head, const Dataset& batch,
                                 const GradCheckConfig& cfg, const GradTamper* tamper) {
    if (batch.empty()) throw DataError("gradient check needs at least one image");
    LossSetup setup;
    setup.kind = cfg.kind;
    setup.alpha = cfg.alpha;
    setup.beta_one = cfg.beta_one;
    setup.comp = comp;
    setup.head = head;
    if (setup.kind == LossKind::compensated && comp == nullptr)
        throw ConfigError("compensated check requires a compensation matrix");
    if ((setup.kind == LossKind::s_model || setup.kind == LossKind::c_model) && head == nullptr)
        throw ConfigError("transition check requires a head");

    // Dropout off (masks would not be held fixed across the probe evals);
    // batch statistics on, running stats untouched.
    const double saved_rate = model.dropout_rate;
    model.dropout_rate = 0.0;
    FwdOpts opts;
    opts.batch_stats = true;
    opts.dropout = false;
    opts.update_running = false;

    std::vector<int> indices(batch.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);

    std::vector<ParamRef> refs = collect_params(model, setup);
    zero_all(refs);
    batch_loss(model, setup, batch, indices, opts, nullptr, true);

    std::vector<std::vector<double>> analytic(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) analytic[i] = refs[i].second->g;
    if (tamper) {
        bool found = false;
        for (size_t i = 0; i < refs.size(); ++i) {
            if (refs[i].first == tamper->group && tamper->index < analytic[i].size()) {
                analytic[i][tamper->index] += tamper->add;
                found = true;
            }
        }
        if (!found) throw ConfigError("tamper target not found: " + tamper->group);
    }

    auto eval_loss = [&]() {
        return batch_loss(model, setup, batch, indices, opts, nullptr, false).total;
    };

    FdReport report;
    for (size_t i = 0; i < refs.size(); ++i) {
        Param& p = *refs[i].second;
        for (size_t j = 0; j < p.v.size(); ++j) {
            const double orig = p.v[j];
            const double h = 1e-4 * std::max(1.0, std::abs(orig));
            p.v[j] = orig + h;
            const double lp = eval_loss();
            p.v[j] = orig - h;
            const double lm = eval_loss();
            p.v[j] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double rel =
                std::abs(analytic[i][j] - fd) / std::max(1e-8, std::abs(fd));
            ++report.params_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = refs[i].first + "[" + std::to_string(j) + "]";
            }
            if (rel > cfg.tolerance && report.offenders.size() < 20)
                report.offenders.push_back(
                    {refs[i].first + "[" + std::to_string(j) + "]", rel});
        }
    }
    report.pass = report.max_rel_err <= cfg.tolerance;
    model.dropout_rate = saved_rate;
    return report;
}

}  // namespace segcomp
