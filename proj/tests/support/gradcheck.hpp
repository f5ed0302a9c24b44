#pragma once

// Central finite-difference check of the analytic gradients, run on the
// double-precision instantiation of the model.

#include <cmath>
#include <string>
#include <vector>

#include "ehrseq/model.hpp"

namespace gradcheck {

struct Result {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t checked = 0;
};

inline Result run(const std::vector<ehrseq::model::Example>& batch,
                  const ehrseq::model::ModelConfig& cfg, ehrseq::model::Objective obj,
                  uint64_t init_seed, double eps = 1e-3) {
    using ehrseq::model::loss_and_grads;
    auto params = ehrseq::model::init_params<double>(cfg, init_seed);
    ehrseq::model::Params<double> grads(cfg);
    loss_and_grads<double>(batch, params, cfg, obj, &grads, false, 0, 1);

    Result result;
    auto prefs = params.array_refs();
    auto grefs = grads.array_refs();
    for (size_t a = 0; a < prefs.size(); ++a) {
        auto& values = *prefs[a].data;
        const auto& analytic = *grefs[a].data;
        for (size_t k = 0; k < values.size(); ++k) {
            const double orig = values[k];
            values[k] = orig + eps;
            const double up = loss_and_grads<double>(batch, params, cfg, obj, nullptr);
            values[k] = orig - eps;
            const double down = loss_and_grads<double>(batch, params, cfg, obj, nullptr);
            values[k] = orig;
            const double fd = (up - down) / (2.0 * eps);
            const double g = analytic[k];
            ++result.checked;
            if (std::abs(g) < 1e-7 && std::abs(fd) < 1e-7) continue;  // both numerically zero
            const double rel =
                std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-7});
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = prefs[a].name + "[" + std::to_string(k) + "]";
            }
        }
    }
    return result;
}

}  // namespace gradcheck
