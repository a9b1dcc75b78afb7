#include "ctd/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <sstream>

#include "ctd/error.hpp"

namespace ctd {

namespace {
int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        check(d >= 0, Error::Kind::shape, "negative tensor dimension");
        n *= d;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

void Tensor::reshape(std::vector<int> shape) {
    check(shape_numel(shape) == numel(), Error::Kind::shape,
          "reshape changes element count");
    shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_scaled(const Tensor& other, double scale) {
    check(same_shape(other), Error::Kind::shape,
          "add_scaled shape mismatch: " + shape_str() + " vs " + other.shape_str());
    const double* o = other.data();
    double* d = data();
    for (int64_t i = 0, n = numel(); i < n; ++i) d[i] += scale * o[i];
}

void Tensor::scale(double s) {
    for (double& v : data_) v *= s;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += CMap(a, m, k) * CMap(b, k, n);
    else
        cm.noalias() = CMap(a, m, k) * CMap(b, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += CMap(a, m, k) * CMap(b, n, k).transpose();
    else
        cm.noalias() = CMap(a, m, k) * CMap(b, n, k).transpose();
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate) {
    Map cm(c, m, n);
    if (accumulate)
        cm.noalias() += CMap(a, k, m).transpose() * CMap(b, k, n);
    else
        cm.noalias() = CMap(a, k, m).transpose() * CMap(b, k, n);
}

}  // namespace ctd
