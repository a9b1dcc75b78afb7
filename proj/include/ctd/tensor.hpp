#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctd {

/// Dense row-major tensor of doubles. Shapes are small vectors of ints;
/// the common layouts are [C,H,W] feature maps and [out,in] weight
/// matrices. Kept deliberately minimal: the heavy lifting is done by the
/// GEMM helpers below.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);

    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // [C,H,W] accessors
    double& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    // [R,C] accessors
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    /// Reinterpret the (contiguous) data with a new shape of equal size.
    void reshape(std::vector<int> shape);

    void fill(double v);
    void zero() { fill(0.0); }
    /// this += scale * other (shapes must match)
    void add_scaled(const Tensor& other, double scale = 1.0);
    void scale(double s);
    double max_abs() const;
    double sum() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// ---- GEMM helpers (row-major, Eigen-backed) --------------------------------

/// C[m,n] = A[m,k] * B[k,n]; accumulates into C when `accumulate`.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate = false);
/// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate = false);
/// C[m,n] = A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n,
             bool accumulate = false);

}  // namespace ctd
