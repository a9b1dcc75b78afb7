#include "ctd/losses.hpp"

#include <cmath>

#include "ctd/error.hpp"

namespace ctd::train {

namespace {

inline double stable_sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// log(sigmoid(z)) without overflow
inline double log_sigmoid(double z) {
    return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

// loss and d(loss)/d(logit) of one focal term with binary target t
inline double focal_term(double z, bool t, double alpha, double gamma, double* dz) {
    const double p = stable_sigmoid(z);
    const double pt = t ? p : 1.0 - p;
    const double at = t ? alpha : 1.0 - alpha;
    const double log_pt = t ? log_sigmoid(z) : log_sigmoid(-z);
    const double one_minus = 1.0 - pt;
    const double pow_term = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
    if (dz) {
        const double sign = t ? 1.0 : -1.0;
        *dz = sign * at * pow_term * (gamma * pt * log_pt - one_minus);
    }
    return -at * pow_term * log_pt;
}

}  // namespace

double focal_loss(const Tensor& logits, const std::vector<int8_t>& state,
                  const std::vector<int>& pos_class, double alpha, double gamma,
                  Tensor* dlogits) {
    const int n = logits.dim(0);
    check(logits.ndim() == 2 && logits.dim(1) == 2, Error::Kind::shape,
          "focal loss expects [N,2] logits");
    check(static_cast<int>(state.size()) == n, Error::Kind::shape,
          "state size mismatch");
    int npos = 0;
    for (int8_t s : state)
        if (s == kPositive) ++npos;
    const double norm = std::max(1, npos);

    if (dlogits) {
        *dlogits = Tensor(logits.shape());
    }
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (state[static_cast<size_t>(i)] == kIgnore) continue;
        const bool positive = state[static_cast<size_t>(i)] == kPositive;
        for (int c = 0; c < 2; ++c) {
            const bool target = positive && pos_class[static_cast<size_t>(i)] == c;
            double dz = 0.0;
            total += focal_term(logits.at(i, c), target, alpha, gamma,
                                dlogits ? &dz : nullptr);
            if (dlogits) dlogits->at(i, c) = dz / norm;
        }
    }
    return total / norm;
}

double smooth_l1(double diff, double beta, double* grad) {
    const double a = std::fabs(diff);
    if (a < beta) {
        if (grad) *grad = diff / beta;
        return 0.5 * diff * diff / beta;
    }
    if (grad) *grad = diff > 0 ? 1.0 : -1.0;
    return a - 0.5 * beta;
}

double box_regression_loss(const Tensor& pred, const Tensor& target, double beta,
                           Tensor* dpred) {
    check(pred.same_shape(target) && pred.ndim() == 2 && pred.dim(1) == 4,
          Error::Kind::shape, "box loss expects matching [P,4] tensors");
    const int p = pred.dim(0);
    if (dpred) *dpred = Tensor(pred.shape());
    if (p == 0) return 0.0;
    double total = 0.0;
    for (int i = 0; i < p; ++i) {
        for (int c = 0; c < 4; ++c) {
            double g = 0.0;
            total += smooth_l1(pred.at(i, c) - target.at(i, c), beta, dpred ? &g : nullptr);
            if (dpred) dpred->at(i, c) = g / p;
        }
    }
    return total / p;
}

double cross_entropy3(const Tensor& logits, int label, Tensor* dlogits) {
    check(logits.numel() == 3, Error::Kind::shape, "expected 3 logits");
    check(label >= 0 && label < 3, Error::Kind::validation, "label out of range");
    const double mx = std::max({logits[0], logits[1], logits[2]});
    double denom = 0.0;
    double soft[3];
    for (int i = 0; i < 3; ++i) {
        soft[i] = std::exp(logits[i] - mx);
        denom += soft[i];
    }
    for (double& s : soft) s /= denom;
    if (dlogits) {
        *dlogits = Tensor({3});
        for (int i = 0; i < 3; ++i) (*dlogits)[i] = soft[i] - (i == label ? 1.0 : 0.0);
    }
    return -std::log(soft[label]);
}

}  // namespace ctd::train
