#include "segcomp/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "segcomp/compensation.hpp"
#include "segcomp/error.hpp"

namespace segcomp {

InductionSpec InductionSpec::zero(int num_classes) {
    InductionSpec s;
    s.num_classes = num_classes;
    s.matrix.assign(static_cast<size_t>(num_classes) * num_classes, 0.0);
    return s;
}

void InductionSpec::validate() const {
    if (num_classes < 2) throw ConfigError("induction spec needs at least 2 classes");
    if (matrix.size() != static_cast<size_t>(num_classes) * num_classes)
        throw ConfigError("induction matrix must be K x K");
    for (double x : matrix)
        if (!std::isfinite(x)) throw NumericError("non-finite entry in induction matrix");
}

namespace {

int argmax_lowest_tie(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace

Prediction predict(SegModel& model, const FeatureGrid& features) {
    const int k = model.dims.num_classes;
    ForwardResult fr = forward(model, features, Mode::eval);
    Prediction out;
    out.labels = LabelGrid(features.h, features.w);
    out.probs = ProbGrid(features.h, features.w, k);
    const size_t n = fr.logits.pixels();
    for (size_t p = 0; p < n; ++p) {
        std::span<double> probs(out.probs.v.data() + p * k, k);
        plain_probabilities(std::span<const double>(fr.logits.v.data() + p * k, k), probs);
        out.labels.v[p] = argmax_lowest_tie(probs.data(), k);
    }
    return out;
}

LabelGrid predict_labels(SegModel& model, const FeatureGrid& features) {
    return predict(model, features).labels;
}

LabelGrid bias_induced_predict(SegModel& model, const FeatureGrid& features,
                               const InductionSpec& spec) {
    spec.validate();
    const int k = model.dims.num_classes;
    if (spec.num_classes != k) throw ConfigError("induction matrix K does not match model");

    ForwardResult fr = forward(model, features, Mode::eval);
    LabelGrid out(features.h, features.w);
    const size_t n = fr.logits.pixels();
    std::vector<double> q(k), z(k);
    for (size_t p = 0; p < n; ++p) {
        const double* l = fr.logits.v.data() + p * k;
        plain_probabilities(std::span<const double>(l, k), q);
        if (spec.relaxation == InductionSpec::Relaxation::hard) {
            const int top = argmax_lowest_tie(q.data(), k);
            std::fill(q.begin(), q.end(), 0.0);
            q[top] = 1.0;
        }
        const double beta =
            spec.beta_source == InductionSpec::BetaSource::branch ? fr.beta.v[p] : 1.0;
        for (int i = 0; i < k; ++i) {
            double bias = 0.0;
            const double* row = spec.matrix.data() + static_cast<size_t>(i) * k;
            for (int j = 0; j < k; ++j) bias += row[j] * q[j];
            z[i] = l[i] + beta * bias;
        }
        out.v[p] = argmax_lowest_tie(z.data(), k);
    }
    return out;
}

void write_predictions(const std::filesystem::path& dir,
                       const std::vector<LabelGrid>& preds, int num_classes,
                       const std::vector<std::string>& class_names, uint64_t seed) {
    if (preds.empty()) throw DataError("no predictions to write");
    const int h = preds[0].h, w = preds[0].w;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw DataError("cannot create prediction directory " + dir.string());
    {
        std::ofstream out(dir / "labels.bin", std::ios::binary);
        if (!out) throw DataError("cannot write labels.bin under " + dir.string());
        std::vector<uint8_t> buf;
        for (const auto& img : preds) {
            if (img.h != h || img.w != w) throw DataError("prediction shape mismatch");
            buf.assign(img.v.begin(), img.v.end());
            out.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size()));
        }
    }
    nlohmann::ordered_json m;
    m["height"] = h;
    m["width"] = w;
    m["num_classes"] = num_classes;
    m["image_count"] = preds.size();
    m["seed"] = seed;
    m["class_names"] =
        class_names.empty() ? default_class_names(num_classes) : class_names;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw DataError("cannot write manifest.json under " + dir.string());
    out << m.dump(2) << "\n";
}

}  // namespace segcomp
