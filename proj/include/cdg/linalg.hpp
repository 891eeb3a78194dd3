#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cdg {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix column(std::span<const double> v);
    static Matrix from_rows(const std::vector<Vector>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    Vector col(std::size_t c) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    Matrix transposed() const;
    bool all_finite() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double alpha, const Matrix& a);

// a^T b without forming the transpose.
Matrix transpose_times(const Matrix& a, const Matrix& b);
Vector mat_vec(const Matrix& a, std::span<const double> x);

double frobenius_norm(const Matrix& m);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Largest |(U^T U - I)_ij|.
double orthonormality_defect(const Matrix& u);

struct SvdResult {
    Matrix u;   // rows x k, orthonormal columns
    Vector s;   // k values, descending, nonnegative
    Matrix vt;  // k x cols, orthonormal rows
};

inline constexpr double kRankTolerance = 1e-12;

// One-sided (Hestenes) Jacobi thin SVD, k = min(rows, cols).
SvdResult thin_svd(const Matrix& m);

// Number of singular values above kRankTolerance * s[0].
std::size_t numerical_rank(std::span<const double> s);

// cols(m) x k matrix whose orthonormal columns span the top-k right-singular
// subspace of m.
Matrix orthonormal_basis(const Matrix& m, std::size_t k);

// sin^2 of the principal angles between span(u1) and span(u2), ascending.
// Both inputs must have orthonormal columns; min(cols) angles are returned.
Vector principal_angle_sines_squared(const Matrix& u1, const Matrix& u2);

// basis * (basis^T * v)
Matrix project_onto(const Matrix& basis, const Matrix& v);

} // namespace cdg
