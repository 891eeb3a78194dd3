#include "cdg/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdg/error.hpp"

namespace cdg {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        fail(ErrorCode::InvalidInput, "matrix data length " + std::to_string(data_.size()) +
                                          " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::column(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) {
        return {};
    }
    const std::size_t cols = rows.front().size();
    Matrix m(rows.size(), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != cols) {
            fail(ErrorCode::InvalidInput, "ragged rows");
        }
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

Vector Matrix::col(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        out[r] = (*this)(r, c);
    }
    return out;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        fail(ErrorCode::InvalidInput, "matmul shape mismatch");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    return out;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        fail(ErrorCode::InvalidInput, "elementwise shape mismatch");
    }
}

} // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b);
    Matrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] += bd[i];
    }
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b);
    Matrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] -= bd[i];
    }
    return out;
}

Matrix operator*(double alpha, const Matrix& a) {
    Matrix out = a;
    for (auto& v : out.data()) {
        v *= alpha;
    }
    return out;
}

Matrix transpose_times(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        fail(ErrorCode::InvalidInput, "transpose_times row mismatch");
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto a_row = a.row(k);
        auto b_row = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a_row[i];
            auto out_row = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aki * b_row[j];
            }
        }
    }
    return out;
}

Vector mat_vec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        fail(ErrorCode::InvalidInput, "mat_vec shape mismatch");
    }
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        y[i] = dot(a.row(i), x);
    }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

double orthonormality_defect(const Matrix& u) {
    const Matrix gram = transpose_times(u, u);
    double worst = 0.0;
    for (std::size_t i = 0; i < gram.rows(); ++i) {
        for (std::size_t j = 0; j < gram.cols(); ++j) {
            const double target = i == j ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(gram(i, j) - target));
        }
    }
    return worst;
}

namespace {

constexpr int kMaxSweeps = 80;
constexpr double kJacobiTol = 1e-15;
// Columns below this fraction of the top singular value are treated as null
// directions when forming U; their left vectors come from basis completion.
constexpr double kNullColumnTol = 1e-13;

// Fill column `c` of u with a unit vector orthogonal to columns [0, c).
void complete_column(Matrix& u, std::size_t c) {
    const std::size_t m = u.rows();
    double best_norm = -1.0;
    Vector best;
    for (std::size_t e = 0; e < m; ++e) {
        Vector cand(m, 0.0);
        cand[e] = 1.0;
        // two passes of classical Gram-Schmidt
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < c; ++j) {
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    proj += u(i, j) * cand[i];
                }
                for (std::size_t i = 0; i < m; ++i) {
                    cand[i] -= proj * u(i, j);
                }
            }
        }
        const double n = norm2(cand);
        if (n > best_norm) {
            best_norm = n;
            best = std::move(cand);
        }
        if (best_norm > 0.5) {
            break;
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        u(i, c) = best[i] / best_norm;
    }
}

SvdResult jacobi_tall(const Matrix& input) {
    const std::size_t m = input.rows();
    const std::size_t n = input.cols();
    Matrix a = input;
    Matrix v = Matrix::identity(n);

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0;
                double beta = 0.0;
                double gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p);
                    const double aq = a(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if (gamma == 0.0 || std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p);
                    const double aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p);
                    const double vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }

    Vector norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            acc += a(i, j) * a(i, j);
        }
        norms[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult out{Matrix(m, n), Vector(n), Matrix(n, n)};
    const double top = norms[order.front()];
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.s[k] = norms[j];
        for (std::size_t i = 0; i < n; ++i) {
            out.vt(k, i) = v(i, j);
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        if (norms[j] > kNullColumnTol * top && norms[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) {
                out.u(i, k) = a(i, j) / norms[j];
            }
        } else {
            complete_column(out.u, k);
        }
    }
    return out;
}

} // namespace

SvdResult thin_svd(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) {
        fail(ErrorCode::InvalidInput, "thin_svd of an empty matrix");
    }
    if (!m.all_finite()) {
        fail(ErrorCode::InvalidInput, "thin_svd input has non-finite entries");
    }
    if (m.rows() >= m.cols()) {
        return jacobi_tall(m);
    }
    SvdResult t = jacobi_tall(m.transposed());
    return {t.vt.transposed(), std::move(t.s), t.u.transposed()};
}

std::size_t numerical_rank(std::span<const double> s) {
    if (s.empty() || s.front() <= 0.0) {
        return 0;
    }
    const double cut = kRankTolerance * s.front();
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double x) { return x > cut; }));
}

Matrix orthonormal_basis(const Matrix& m, std::size_t k) {
    if (k == 0) {
        fail(ErrorCode::InvalidInput, "orthonormal_basis with k = 0");
    }
    if (k > std::min(m.rows(), m.cols())) {
        fail(ErrorCode::InvalidInput, "orthonormal_basis k exceeds min(rows, cols)");
    }
    const SvdResult svd = thin_svd(m);
    Matrix basis(m.cols(), k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < m.cols(); ++i) {
            basis(i, j) = svd.vt(j, i);
        }
    }
    return basis;
}

Vector principal_angle_sines_squared(const Matrix& u1, const Matrix& u2) {
    constexpr double kGramTol = 1e-8;
    if (u1.rows() != u2.rows()) {
        fail(ErrorCode::InvalidInput, "principal angles need equal ambient dimension");
    }
    if (u1.cols() == 0 || u2.cols() == 0) {
        fail(ErrorCode::InvalidInput, "principal angles of an empty basis");
    }
    if (orthonormality_defect(u1) > kGramTol || orthonormality_defect(u2) > kGramTol) {
        fail(ErrorCode::InvalidInput, "principal angles need orthonormal columns");
    }
    const Matrix& small = u1.cols() <= u2.cols() ? u1 : u2;
    const Matrix& large = u1.cols() <= u2.cols() ? u2 : u1;
    const SvdResult svd = thin_svd(transpose_times(small, large));
    Vector out(svd.s.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double c = std::clamp(svd.s[i], 0.0, 1.0);
        out[i] = 1.0 - c * c;
    }
    return out;
}

Matrix project_onto(const Matrix& basis, const Matrix& v) {
    if (basis.rows() != v.rows()) {
        fail(ErrorCode::InvalidInput, "project_onto dimension mismatch");
    }
    return basis * transpose_times(basis, v);
}

} // namespace cdg
