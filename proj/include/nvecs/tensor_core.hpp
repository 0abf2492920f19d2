#pragma once

// Complex linear algebra over labeled tensor-product Hilbert spaces.
//
// Ordering convention: factor-major, first factor slowest. A basis index of
// a composite space is sum_k i_k * stride_k with stride of the last factor 1.
// Qubit basis: index 0 = |e>, index 1 = |g>, so sigma_z = diag(1, -1).

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <unsupported/Eigen/KroneckerProduct>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <set>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nvecs/errors.hpp"

namespace nvecs {

using cplx = std::complex<double>;
using DenseMatrix = Eigen::MatrixXcd;
using SparseMatrix = Eigen::SparseMatrix<cplx>;
using Vector = Eigen::VectorXcd;

inline constexpr cplx kI{0.0, 1.0};
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

enum class FactorKind { qubit, boson };

struct Factor {
    std::string label;
    std::size_t dim = 0;
    FactorKind kind = FactorKind::boson;

    friend bool operator==(const Factor&, const Factor&) = default;
};

class SpaceSignature {
public:
    SpaceSignature() = default;

    explicit SpaceSignature(std::vector<Factor> factors) : factors_(std::move(factors)) {
        for (std::size_t i = 0; i < factors_.size(); ++i) {
            const auto& f = factors_[i];
            if (f.label.empty()) throw LabelError("empty factor label");
            if (f.kind == FactorKind::qubit && f.dim != 2)
                throw DimensionError("qubit factor '" + f.label + "' must have dim 2");
            if (f.dim < 1) throw DimensionError("factor '" + f.label + "' has dim 0");
            for (std::size_t k = 0; k < i; ++k)
                if (factors_[k].label == f.label) throw LabelError("duplicate factor label '" + f.label + "'");
        }
    }

    static Factor qubit(std::string label) { return {std::move(label), 2, FactorKind::qubit}; }
    static Factor boson(std::string label, std::size_t dim) { return {std::move(label), dim, FactorKind::boson}; }

    std::size_t size() const noexcept { return factors_.size(); }
    bool empty() const noexcept { return factors_.empty(); }
    const Factor& operator[](std::size_t i) const { return factors_.at(i); }
    const std::vector<Factor>& factors() const noexcept { return factors_; }

    std::size_t total_dim() const {
        std::size_t d = 1;
        for (const auto& f : factors_) d *= f.dim;
        return d;
    }

    std::optional<std::size_t> find(const std::string& label) const {
        for (std::size_t i = 0; i < factors_.size(); ++i)
            if (factors_[i].label == label) return i;
        return std::nullopt;
    }

    bool contains(const std::string& label) const { return find(label).has_value(); }

    std::size_t index_of(const std::string& label) const {
        auto i = find(label);
        if (!i) throw LabelError("unknown factor label '" + label + "' in " + describe());
        return *i;
    }

    std::size_t dim_of(const std::string& label) const { return factors_[index_of(label)].dim; }

    std::vector<std::size_t> strides() const {
        std::vector<std::size_t> s(factors_.size(), 1);
        for (std::size_t i = factors_.size(); i-- > 1;) s[i - 1] = s[i] * factors_[i].dim;
        return s;
    }

    // Per-factor digits of a composite basis index.
    std::vector<std::size_t> digits(std::size_t index) const {
        std::vector<std::size_t> d(factors_.size());
        for (std::size_t i = factors_.size(); i-- > 0;) {
            d[i] = index % factors_[i].dim;
            index /= factors_[i].dim;
        }
        return d;
    }

    std::size_t compose(std::span<const std::size_t> digits) const {
        std::size_t idx = 0;
        for (std::size_t i = 0; i < factors_.size(); ++i) idx = idx * factors_[i].dim + digits[i];
        return idx;
    }

    // Factors with the given labels, kept in this signature's order.
    SpaceSignature subset(const std::vector<std::string>& labels) const {
        for (const auto& l : labels) index_of(l);
        std::vector<Factor> out;
        for (const auto& f : factors_)
            if (std::find(labels.begin(), labels.end(), f.label) != labels.end()) out.push_back(f);
        return SpaceSignature(std::move(out));
    }

    SpaceSignature concat(const SpaceSignature& other) const {
        auto f = factors_;
        f.insert(f.end(), other.factors_.begin(), other.factors_.end());
        return SpaceSignature(std::move(f));
    }

    std::string describe() const {
        std::string s = "(";
        for (std::size_t i = 0; i < factors_.size(); ++i) {
            if (i) s += ", ";
            s += factors_[i].label + ":" + std::to_string(factors_[i].dim);
        }
        return s + ")";
    }

    friend bool operator==(const SpaceSignature&, const SpaceSignature&) = default;

private:
    std::vector<Factor> factors_;
};

inline void require_same_signature(const SpaceSignature& a, const SpaceSignature& b, const char* what) {
    if (!(a == b)) throw DimensionError(std::string(what) + ": signature mismatch " + a.describe() + " vs " + b.describe());
}

// Complex operator on a signature. Stored dense below kDenseThreshold total
// dimension and sparse (compressed column) at or above it.
class Operator {
public:
    static constexpr std::size_t kDenseThreshold = 256;

    Operator() = default;

    Operator(SpaceSignature sig, const DenseMatrix& m) : sig_(std::move(sig)) {
        check_shape(m.rows(), m.cols());
        if (dim() < kDenseThreshold)
            data_ = m;
        else
            data_ = SparseMatrix(m.sparseView(0.0, 0.0));
    }

    Operator(SpaceSignature sig, const SparseMatrix& m) : sig_(std::move(sig)) {
        check_shape(m.rows(), m.cols());
        if (dim() < kDenseThreshold)
            data_ = DenseMatrix(m);
        else {
            SparseMatrix c = m;
            c.makeCompressed();
            data_ = std::move(c);
        }
    }

    static Operator zero(const SpaceSignature& sig) {
        const auto d = static_cast<Eigen::Index>(sig.total_dim());
        return Operator(sig, SparseMatrix(d, d));
    }

    static Operator identity(const SpaceSignature& sig) {
        const auto d = static_cast<Eigen::Index>(sig.total_dim());
        SparseMatrix id(d, d);
        id.setIdentity();
        return Operator(sig, id);
    }

    const SpaceSignature& signature() const noexcept { return sig_; }
    std::size_t dim() const { return sig_.total_dim(); }
    bool is_sparse() const noexcept { return std::holds_alternative<SparseMatrix>(data_); }

    DenseMatrix dense() const {
        if (is_sparse()) return DenseMatrix(std::get<SparseMatrix>(data_));
        return std::get<DenseMatrix>(data_);
    }

    SparseMatrix sparse() const {
        if (is_sparse()) return std::get<SparseMatrix>(data_);
        SparseMatrix s = std::get<DenseMatrix>(data_).sparseView(0.0, 0.0);
        s.makeCompressed();
        return s;
    }

    cplx element(std::size_t row, std::size_t col) const {
        const auto r = static_cast<Eigen::Index>(row), c = static_cast<Eigen::Index>(col);
        if (is_sparse()) return std::get<SparseMatrix>(data_).coeff(r, c);
        return std::get<DenseMatrix>(data_)(r, c);
    }

    Operator adjoint() const {
        if (is_sparse()) return Operator(sig_, SparseMatrix(std::get<SparseMatrix>(data_).adjoint()));
        return Operator(sig_, DenseMatrix(std::get<DenseMatrix>(data_).adjoint()));
    }

    double max_abs_deviation_from_hermitian() const {
        if (is_sparse()) {
            const auto& s = std::get<SparseMatrix>(data_);
            SparseMatrix d = s - SparseMatrix(s.adjoint());
            double m = 0.0;
            for (Eigen::Index k = 0; k < d.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(d, k); it; ++it) m = std::max(m, std::abs(it.value()));
            return m;
        }
        const auto& m = std::get<DenseMatrix>(data_);
        return m.rows() == 0 ? 0.0 : (m - m.adjoint()).cwiseAbs().maxCoeff();
    }

    bool is_hermitian(double tol = 1e-12) const { return max_abs_deviation_from_hermitian() <= tol; }

    // Verifies Hermiticity to `tol` and records it.
    Operator& mark_hermitian(double tol = 1e-12) {
        const double dev = max_abs_deviation_from_hermitian();
        if (dev > tol) throw Error("operator is not Hermitian (max deviation " + std::to_string(dev) + ")");
        hermitian_ = true;
        return *this;
    }
    bool hermitian_flag() const noexcept { return hermitian_; }

    Vector apply(const Vector& v) const {
        if (static_cast<std::size_t>(v.size()) != dim()) throw DimensionError("Operator::apply: vector size mismatch");
        if (is_sparse()) return std::get<SparseMatrix>(data_) * v;
        return std::get<DenseMatrix>(data_) * v;
    }

    DenseMatrix apply(const DenseMatrix& m) const {
        if (static_cast<std::size_t>(m.rows()) != dim()) throw DimensionError("Operator::apply: matrix size mismatch");
        if (is_sparse()) return std::get<SparseMatrix>(data_) * m;
        return std::get<DenseMatrix>(data_) * m;
    }

    Operator& operator+=(const Operator& o) {
        require_same_signature(sig_, o.sig_, "Operator +=");
        if (is_sparse() || o.is_sparse())
            *this = Operator(sig_, SparseMatrix(sparse() + o.sparse()));
        else
            std::get<DenseMatrix>(data_) += std::get<DenseMatrix>(o.data_);
        hermitian_ = false;
        return *this;
    }

    Operator& operator-=(const Operator& o) { return *this += o * cplx(-1.0); }

    Operator& operator*=(cplx s) {
        std::visit([s](auto& m) { m *= s; }, data_);
        hermitian_ = hermitian_ && s.imag() == 0.0;
        return *this;
    }

    friend Operator operator+(Operator a, const Operator& b) { return a += b; }
    friend Operator operator-(Operator a, const Operator& b) { return a -= b; }
    friend Operator operator*(Operator a, cplx s) { return a *= s; }
    friend Operator operator*(cplx s, Operator a) { return a *= s; }
    friend Operator operator*(Operator a, double s) { return a *= cplx(s); }
    friend Operator operator*(double s, Operator a) { return a *= cplx(s); }

    friend Operator operator*(const Operator& a, const Operator& b) {
        require_same_signature(a.sig_, b.sig_, "Operator product");
        if (a.is_sparse() || b.is_sparse()) return Operator(a.sig_, SparseMatrix(a.sparse() * b.sparse()));
        return Operator(a.sig_, DenseMatrix(std::get<DenseMatrix>(a.data_) * std::get<DenseMatrix>(b.data_)));
    }

    friend Operator commutator(const Operator& a, const Operator& b) { return a * b - b * a; }

private:
    void check_shape(Eigen::Index r, Eigen::Index c) const {
        const auto d = static_cast<Eigen::Index>(sig_.total_dim());
        if (r != d || c != d)
            throw DimensionError("operator shape " + std::to_string(r) + "x" + std::to_string(c) +
                                 " does not match signature " + sig_.describe());
    }

    SpaceSignature sig_;
    std::variant<DenseMatrix, SparseMatrix> data_;
    bool hermitian_ = false;
};

enum class Normalization { normalized, unnormalized };

class StateVector {
public:
    static constexpr double kNormTolerance = 1e-10;

    StateVector() = default;

    StateVector(SpaceSignature sig, Vector amplitudes, Normalization mode = Normalization::normalized)
        : sig_(std::move(sig)), amps_(std::move(amplitudes)), mode_(mode) {
        if (static_cast<std::size_t>(amps_.size()) != sig_.total_dim())
            throw DimensionError("state size " + std::to_string(amps_.size()) + " does not match " + sig_.describe());
        if (mode_ == Normalization::normalized && std::abs(amps_.norm() - 1.0) > kNormTolerance)
            throw Error("state is not normalized (norm " + std::to_string(amps_.norm()) + ")");
    }

    const SpaceSignature& signature() const noexcept { return sig_; }
    const Vector& amplitudes() const noexcept { return amps_; }
    std::size_t dim() const { return static_cast<std::size_t>(amps_.size()); }
    double norm() const { return amps_.norm(); }
    bool is_normalized() const noexcept { return mode_ == Normalization::normalized; }

    StateVector normalized() const {
        const double n = norm();
        if (n == 0.0) throw Error("cannot normalize a zero vector");
        return StateVector(sig_, amps_ / n);
    }

    // <this|other>
    cplx inner(const StateVector& other) const {
        require_same_signature(sig_, other.sig_, "StateVector::inner");
        return amps_.dot(other.amps_);
    }

private:
    SpaceSignature sig_;
    Vector amps_;
    Normalization mode_ = Normalization::normalized;
};

class DensityMatrix {
public:
    enum class Trace { unit, recorded };

    DensityMatrix() = default;

    // Validates Hermiticity (1e-10), unit trace (`trace_tol`, unit mode
    // only) and, for dim <= 256, eigenvalues >= -`positivity_tol`.
    DensityMatrix(SpaceSignature sig, DenseMatrix data, Trace mode = Trace::unit, double trace_tol = 1e-8,
                  double positivity_tol = 1e-8)
        : sig_(std::move(sig)), data_(std::move(data)), mode_(mode) {
        const auto d = static_cast<Eigen::Index>(sig_.total_dim());
        if (data_.rows() != d || data_.cols() != d)
            throw DimensionError("density matrix shape does not match " + sig_.describe());
        const double herm = d == 0 ? 0.0 : (data_ - data_.adjoint()).cwiseAbs().maxCoeff();
        if (herm > 1e-10) throw Error("density matrix is not Hermitian (deviation " + std::to_string(herm) + ")");
        if (mode_ == Trace::unit && std::abs(trace() - 1.0) > trace_tol)
            throw Error("density matrix trace " + std::to_string(trace()) + " differs from 1");
        if (d <= 256 && min_eigenvalue() < -positivity_tol)
            throw Error("density matrix has negative eigenvalue " + std::to_string(min_eigenvalue()));
    }

    static DensityMatrix from_pure(const StateVector& psi) {
        const Vector& v = psi.amplitudes();
        return DensityMatrix(psi.signature(), v * v.adjoint(),
                             psi.is_normalized() ? Trace::unit : Trace::recorded);
    }

    const SpaceSignature& signature() const noexcept { return sig_; }
    const DenseMatrix& data() const noexcept { return data_; }
    std::size_t dim() const { return sig_.total_dim(); }
    double trace() const { return data_.trace().real(); }
    bool unit_trace() const noexcept { return mode_ == Trace::unit; }

    double min_eigenvalue() const {
        if (data_.rows() == 0) return 0.0;
        DenseMatrix h = 0.5 * (data_ + data_.adjoint());
        Eigen::SelfAdjointEigenSolver<DenseMatrix> es(h, Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    }

private:
    SpaceSignature sig_;
    DenseMatrix data_;
    Trace mode_ = Trace::unit;
};

// ---------------------------------------------------------------------------
// Local kets and operators

inline Vector fock_ket(std::size_t dim, std::size_t n) {
    if (n >= dim) throw DimensionError("Fock level " + std::to_string(n) + " outside dim " + std::to_string(dim));
    Vector v = Vector::Zero(static_cast<Eigen::Index>(dim));
    v(static_cast<Eigen::Index>(n)) = 1.0;
    return v;
}

inline Vector ket_e() { return fock_ket(2, 0); }
inline Vector ket_g() { return fock_ket(2, 1); }
inline Vector ket_plus() { return (ket_e() + ket_g()) / std::sqrt(2.0); }
inline Vector ket_minus() { return (ket_e() - ket_g()) / std::sqrt(2.0); }

struct BosonOps {
    DenseMatrix annihilation;
    DenseMatrix creation;
    DenseMatrix number;
};

// Truncated Fock-space ladder operators, <n-1|a|n> = sqrt(n).
inline BosonOps make_boson_ops(std::size_t dim) {
    if (dim < 2) throw DimensionError("boson truncation must be >= 2, got " + std::to_string(dim));
    const auto d = static_cast<Eigen::Index>(dim);
    DenseMatrix a = DenseMatrix::Zero(d, d);
    for (Eigen::Index n = 1; n < d; ++n) a(n - 1, n) = std::sqrt(static_cast<double>(n));
    DenseMatrix ad = a.adjoint();
    DenseMatrix num = ad * a;
    return {std::move(a), std::move(ad), std::move(num)};
}

struct QubitOps {
    DenseMatrix sigma_minus;  // |g><e|
    DenseMatrix sigma_plus;   // |e><g|
    DenseMatrix sigma_z;      // |e><e| - |g><g|
    DenseMatrix proj_g;
    DenseMatrix proj_e;
};

inline QubitOps make_qubit_ops() {
    const Vector e = ket_e(), g = ket_g();
    QubitOps q;
    q.sigma_minus = g * e.adjoint();
    q.sigma_plus = e * g.adjoint();
    q.proj_g = g * g.adjoint();
    q.proj_e = e * e.adjoint();
    q.sigma_z = q.proj_e - q.proj_g;
    return q;
}

// I (x) ... (x) op (x) ... (x) I with `op` on the labeled factor.
inline Operator embed(const DenseMatrix& op, const std::string& target_label, const SpaceSignature& sig) {
    const std::size_t k = sig.index_of(target_label);
    const auto d = static_cast<Eigen::Index>(sig[k].dim);
    if (op.rows() != d || op.cols() != d)
        throw DimensionError("embed: operator dim " + std::to_string(op.rows()) + " does not match factor '" +
                             target_label + "' dim " + std::to_string(d));
    std::size_t left = 1, right = 1;
    for (std::size_t i = 0; i < k; ++i) left *= sig[i].dim;
    for (std::size_t i = k + 1; i < sig.size(); ++i) right *= sig[i].dim;
    SparseMatrix il(static_cast<Eigen::Index>(left), static_cast<Eigen::Index>(left));
    SparseMatrix ir(static_cast<Eigen::Index>(right), static_cast<Eigen::Index>(right));
    il.setIdentity();
    ir.setIdentity();
    SparseMatrix local = op.sparseView(0.0, 0.0);
    SparseMatrix tmp = Eigen::kroneckerProduct(il, local);
    SparseMatrix full = Eigen::kroneckerProduct(tmp, ir);
    return Operator(sig, full);
}

inline Operator embed(const Operator& op, const std::string& target_label, const SpaceSignature& sig) {
    return embed(op.dense(), target_label, sig);
}

// Product ket over every factor of `sig`; `kets` maps label -> local ket.
inline StateVector product_state(const SpaceSignature& sig, const std::map<std::string, Vector>& kets,
                                 Normalization mode = Normalization::normalized) {
    Vector v = Vector::Ones(1);
    for (const auto& f : sig.factors()) {
        auto it = kets.find(f.label);
        if (it == kets.end()) throw LabelError("product_state: no ket given for factor '" + f.label + "'");
        if (static_cast<std::size_t>(it->second.size()) != f.dim)
            throw DimensionError("product_state: ket for '" + f.label + "' has wrong dim");
        Vector next = Eigen::kroneckerProduct(v, it->second).eval();
        v = std::move(next);
    }
    return StateVector(sig, std::move(v), mode);
}

inline StateVector kron(const StateVector& a, const StateVector& b) {
    Vector v = Eigen::kroneckerProduct(a.amplitudes(), b.amplitudes()).eval();
    const bool normed = a.is_normalized() && b.is_normalized();
    return StateVector(a.signature().concat(b.signature()), std::move(v),
                       normed ? Normalization::normalized : Normalization::unnormalized);
}

namespace detail {

// For each index of `to`, the index of the same basis state in `from`.
// `to` must hold exactly the factors of `from`, in any order.
inline std::vector<std::size_t> permutation_map(const SpaceSignature& from, const SpaceSignature& to) {
    if (from.size() != to.size()) throw LabelError("permutation: factor sets differ");
    std::vector<std::size_t> pos(to.size());
    for (std::size_t i = 0; i < to.size(); ++i) {
        pos[i] = from.index_of(to[i].label);
        if (from[pos[i]].dim != to[i].dim) throw DimensionError("permutation: dim mismatch for " + to[i].label);
    }
    const auto strides = from.strides();
    const std::size_t d = to.total_dim();
    std::vector<std::size_t> map(d);
    std::vector<std::size_t> digit(to.size(), 0);
    for (std::size_t idx = 0; idx < d; ++idx) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < to.size(); ++i) src += digit[i] * strides[pos[i]];
        map[idx] = src;
        for (std::size_t i = to.size(); i-- > 0;) {
            if (++digit[i] < to[i].dim) break;
            digit[i] = 0;
        }
    }
    return map;
}

// Maps each index of `to` onto (index in `from`, padding amplitude). Factors
// of `to` absent from `from` take their ket from `padding`.
struct ExtensionMap {
    std::vector<std::size_t> source;
    std::vector<cplx> weight;
};

inline ExtensionMap extension_map(const SpaceSignature& from, const SpaceSignature& to,
                                  const std::map<std::string, Vector>& padding) {
    for (const auto& f : from.factors())
        if (!to.contains(f.label)) throw LabelError("extend: factor '" + f.label + "' missing in target");
    std::vector<std::optional<std::size_t>> pos(to.size());
    std::vector<const Vector*> pad(to.size(), nullptr);
    for (std::size_t i = 0; i < to.size(); ++i) {
        pos[i] = from.find(to[i].label);
        if (pos[i]) {
            if (from[*pos[i]].dim != to[i].dim) throw DimensionError("extend: dim mismatch for " + to[i].label);
        } else {
            auto it = padding.find(to[i].label);
            if (it == padding.end()) throw LabelError("extend: no padding ket for '" + to[i].label + "'");
            if (static_cast<std::size_t>(it->second.size()) != to[i].dim)
                throw DimensionError("extend: padding ket for '" + to[i].label + "' has wrong dim");
            pad[i] = &it->second;
        }
    }
    const auto strides = from.strides();
    const std::size_t d = to.total_dim();
    ExtensionMap m;
    m.source.resize(d);
    m.weight.resize(d);
    std::vector<std::size_t> digit(to.size(), 0);
    for (std::size_t idx = 0; idx < d; ++idx) {
        std::size_t src = 0;
        cplx w = 1.0;
        for (std::size_t i = 0; i < to.size(); ++i) {
            if (pos[i])
                src += digit[i] * strides[*pos[i]];
            else
                w *= (*pad[i])(static_cast<Eigen::Index>(digit[i]));
        }
        m.source[idx] = src;
        m.weight[idx] = w;
        for (std::size_t i = to.size(); i-- > 0;) {
            if (++digit[i] < to[i].dim) break;
            digit[i] = 0;
        }
    }
    return m;
}

}  // namespace detail

// Reorders the factors of a state into the order of `to`.
inline StateVector permute(const StateVector& psi, const SpaceSignature& to) {
    const auto map = detail::permutation_map(psi.signature(), to);
    Vector v(static_cast<Eigen::Index>(map.size()));
    for (std::size_t i = 0; i < map.size(); ++i) v(static_cast<Eigen::Index>(i)) = psi.amplitudes()(static_cast<Eigen::Index>(map[i]));
    return StateVector(to, std::move(v), psi.is_normalized() ? Normalization::normalized : Normalization::unnormalized);
}

inline DenseMatrix permute(const DenseMatrix& rho, const SpaceSignature& from, const SpaceSignature& to) {
    const auto map = detail::permutation_map(from, to);
    const auto d = static_cast<Eigen::Index>(map.size());
    DenseMatrix out(d, d);
    for (Eigen::Index c = 0; c < d; ++c)
        for (Eigen::Index r = 0; r < d; ++r)
            out(r, c) = rho(static_cast<Eigen::Index>(map[r]), static_cast<Eigen::Index>(map[c]));
    return out;
}

// X on `from`  ->  X (x) |pad><pad| arranged in the factor order of `to`.
inline DenseMatrix extend(const DenseMatrix& x, const SpaceSignature& from, const SpaceSignature& to,
                          const std::map<std::string, Vector>& padding) {
    const auto m = detail::extension_map(from, to, padding);
    std::vector<Eigen::Index> nz;
    for (std::size_t i = 0; i < m.weight.size(); ++i)
        if (m.weight[i] != cplx(0.0)) nz.push_back(static_cast<Eigen::Index>(i));
    const auto d = static_cast<Eigen::Index>(to.total_dim());
    DenseMatrix out = DenseMatrix::Zero(d, d);
    for (auto c : nz) {
        const cplx wc = std::conj(m.weight[c]);
        const auto sc = static_cast<Eigen::Index>(m.source[c]);
        for (auto r : nz) out(r, c) = x(static_cast<Eigen::Index>(m.source[r]), sc) * m.weight[r] * wc;
    }
    return out;
}

inline StateVector extend(const StateVector& psi, const SpaceSignature& to,
                          const std::map<std::string, Vector>& padding) {
    const auto m = detail::extension_map(psi.signature(), to, padding);
    Vector v(static_cast<Eigen::Index>(m.source.size()));
    for (std::size_t i = 0; i < m.source.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = psi.amplitudes()(static_cast<Eigen::Index>(m.source[i])) * m.weight[i];
    return StateVector(to, std::move(v), Normalization::unnormalized);
}

// ---------------------------------------------------------------------------
// Coherent states, fidelity, partial trace

struct CoherentStateOptions {
    double warn_tail = 1e-8;   // Poisson weight beyond the cutoff that triggers a warning
    double max_tail = 1e-4;    // hard limit
};

namespace detail {

// True the first time a (|alpha|, dim) pair is seen; keeps truncation
// warnings to one line per distinct state.
inline bool first_report(double amplitude, std::size_t dim) {
    static std::mutex m;
    static std::set<std::pair<double, std::size_t>> seen;
    std::lock_guard lock(m);
    return seen.emplace(amplitude, dim).second;
}

}  // namespace detail

// Poisson weight sum_{n >= dim} e^{-|alpha|^2} |alpha|^{2n} / n!.
inline double coherent_tail_weight(cplx alpha, std::size_t dim) {
    const double x = std::norm(alpha);
    if (x == 0.0) return 0.0;
    double term = std::exp(-x);  // n = 0
    for (std::size_t n = 1; n < dim; ++n) term *= x / static_cast<double>(n);
    double tail = 0.0;
    for (std::size_t n = dim; n < dim + 10000; ++n) {
        term *= x / static_cast<double>(n);
        tail += term;
        if (term < 1e-300 || (static_cast<double>(n) > x && term < tail * 1e-18)) break;
    }
    return tail;
}

// Truncated coherent state |alpha>, renormalized after truncation. The
// single-factor signature uses `label`.
inline StateVector coherent_state(cplx alpha, std::size_t dim, const std::string& label = "b",
                                  const CoherentStateOptions& opt = {}) {
    if (dim < 1) throw DimensionError("coherent_state: dim must be >= 1");
    const double tail = coherent_tail_weight(alpha, dim);
    if (tail > opt.max_tail)
        throw TruncationError("coherent_state: |alpha|=" + std::to_string(std::abs(alpha)) + " needs more than " +
                              std::to_string(dim) + " Fock levels (tail " + std::to_string(tail) + ")");
    if (tail > opt.warn_tail && detail::first_report(std::abs(alpha), dim))
        spdlog::warn("coherent_state: truncation tail {:.3e} above {:.1e} for |alpha|={} dim={}", tail, opt.warn_tail,
                     std::abs(alpha), dim);
    Vector v(static_cast<Eigen::Index>(dim));
    cplx c = std::exp(-0.5 * std::norm(alpha));
    for (std::size_t n = 0; n < dim; ++n) {
        if (n > 0) c *= alpha / std::sqrt(static_cast<double>(n));
        v(static_cast<Eigen::Index>(n)) = c;
    }
    const double norm = v.norm();
    spdlog::debug("coherent_state: renormalization factor {:.15g}", 1.0 / norm);
    v /= norm;
    return StateVector(SpaceSignature({SpaceSignature::boson(label, dim)}), std::move(v));
}

// sqrt(<psi|rho|psi>), clamped to [0, 1].
template <class Rho>
double fidelity_pure_target(const Rho& rho, const StateVector& psi) {
    require_same_signature(rho.signature(), psi.signature(), "fidelity_pure_target");
    if (std::abs(psi.norm() - 1.0) > StateVector::kNormTolerance) throw Error("fidelity target is not normalized");
    const Vector& v = psi.amplitudes();
    const double f2 = v.dot(rho.data() * v).real();
    return std::sqrt(std::clamp(f2, 0.0, 1.0));
}

inline DensityMatrix partial_trace(const DensityMatrix& rho, const std::vector<std::string>& keep_labels) {
    if (keep_labels.empty()) throw LabelError("partial_trace: empty keep list");
    const auto& sig = rho.signature();
    const SpaceSignature kept = sig.subset(keep_labels);
    std::vector<std::string> traced_labels;
    for (const auto& f : sig.factors())
        if (!kept.contains(f.label)) traced_labels.push_back(f.label);

    const std::size_t dk = kept.total_dim();
    std::size_t dt = 1;
    for (const auto& l : traced_labels) dt *= sig.dim_of(l);

    // full index for (kept digits, traced digits)
    const SpaceSignature traced = traced_labels.empty() ? SpaceSignature() : sig.subset(traced_labels);
    const auto strides = sig.strides();
    std::vector<std::size_t> kept_off(dk), traced_off(dt);
    for (std::size_t k = 0; k < dk; ++k) {
        const auto dg = kept.digits(k);
        std::size_t off = 0;
        for (std::size_t i = 0; i < kept.size(); ++i) off += dg[i] * strides[sig.index_of(kept[i].label)];
        kept_off[k] = off;
    }
    for (std::size_t t = 0; t < dt; ++t) {
        if (traced.empty()) {
            traced_off[t] = 0;
            continue;
        }
        const auto dg = traced.digits(t);
        std::size_t off = 0;
        for (std::size_t i = 0; i < traced.size(); ++i) off += dg[i] * strides[sig.index_of(traced[i].label)];
        traced_off[t] = off;
    }
    const auto dki = static_cast<Eigen::Index>(dk);
    DenseMatrix out = DenseMatrix::Zero(dki, dki);
    const DenseMatrix& m = rho.data();
    for (std::size_t c = 0; c < dk; ++c)
        for (std::size_t r = 0; r < dk; ++r) {
            cplx s = 0.0;
            for (std::size_t t = 0; t < dt; ++t)
                s += m(static_cast<Eigen::Index>(kept_off[r] + traced_off[t]),
                       static_cast<Eigen::Index>(kept_off[c] + traced_off[t]));
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = s;
        }
    out = 0.5 * (out + out.adjoint()).eval();
    return DensityMatrix(kept, std::move(out), rho.unit_trace() ? DensityMatrix::Trace::unit : DensityMatrix::Trace::recorded,
                         1e-6);
}

// Expectation value Tr(X rho) for a diagonal observable given per-index.
inline double diagonal_expectation(const DenseMatrix& rho, const std::vector<double>& diag) {
    double s = 0.0;
    for (std::size_t i = 0; i < diag.size(); ++i) s += diag[i] * rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)).real();
    return s;
}

}  // namespace nvecs
