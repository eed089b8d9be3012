#pragma once

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "segcomp/compensation.hpp"
#include "segcomp/grids.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

constexpr int kDefaultTopK = 5;
constexpr double kDefaultPhi = 1.0;

// The k classes with the highest probability, descending; ties broken by the
// lower class index. The first element is the argmax o.
std::vector<int> top_k_classes(std::span<const double> probs, int k);

// Local compensation variance: mean over the top-k (uncompensated) classes c
// of (P(Y=o | x, gt=c) - P(Y=o | x))^2, with o the uncompensated argmax. Zero
// whenever B = 0 or beta = 0.
double sigma_sq(std::span<const double> logits, std::span<const double> B, int num_classes,
                double beta, int k);

// Prediction-error likelihood e_x = [sigma^2_x * u_x]^phi with
// u_x = 1 - max_i P(Y=i|x) from plain probabilities. phi rescales for map
// export only; it never changes the pixel ranking.
double error_likelihood(std::span<const double> logits, std::span<const double> B,
                        int num_classes, double beta, int k, double phi);

struct UncertaintyMapSet {
    UncertaintyMap beta;    // branch output
    UncertaintyMap sigma2;  // compensation variance
    UncertaintyMap u;       // 1 - max plain probability
    UncertaintyMap e;       // [sigma^2 * u]^phi
};

UncertaintyMapSet uncertainty_maps(SegModel& model, const CompensationMatrix& comp,
                                   const FeatureGrid& features, int k = kDefaultTopK,
                                   double phi = kDefaultPhi);

// Mean over all pixels of |e_x(k) - e_x(K)| at phi = 1, for each requested k.
std::vector<std::pair<int, double>> k_sensitivity(SegModel& model,
                                                  const CompensationMatrix& comp,
                                                  const Dataset& ds,
                                                  const std::vector<int>& ks);

// Binary PGM (P5), 8-bit, value = round(255 * clamp(v, 0, 1)).
void write_pgm(const std::filesystem::path& file, const UncertaintyMap& map);
// "<base>_<kind>.pgm", with "_phi<phi>" appended for the e map.
std::string map_filename(std::string_view base, const UncertaintyMap& map);

}  // namespace segcomp
