#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace bdistill {

/// Dense row-major (state, action) table.
template <typename Scalar>
using Table = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using QTable = Table<double>;
using VTable = Vector<double>;

/// x log x with the 0 log 0 = 0 convention.
template <typename Scalar>
inline Scalar xlogx(Scalar x)
{
    return x > Scalar(0) ? x * std::log(x) : Scalar(0);
}

/// Numerically stable log-sum-exp with max subtraction. Empty input gives -inf.
template <typename Derived>
typename Derived::Scalar logsumexp(const Eigen::DenseBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    if (x.size() == 0) {
        return -std::numeric_limits<Scalar>::infinity();
    }
    const Scalar m = x.maxCoeff();
    if (!std::isfinite(m)) {
        return m;
    }
    return m + std::log((x.derived().array() - m).exp().sum());
}

/// Softmax of a coefficient vector; shift invariant and overflow free.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::DenseBase<Derived>& x)
{
    using Scalar = typename Derived::Scalar;
    Vector<Scalar> out = x.derived();
    if (out.size() == 0) {
        return out;
    }
    out = (out.array() - out.maxCoeff()).exp();
    out /= out.sum();
    return out;
}

/// Entropy-regularized expectation E_pi[q - log pi] over the entries with pi > 0.
template <typename DerivedP, typename DerivedQ>
typename DerivedQ::Scalar soft_expectation(const Eigen::DenseBase<DerivedP>& pi,
                                           const Eigen::DenseBase<DerivedQ>& q)
{
    using Scalar = typename DerivedQ::Scalar;
    const Vector<Scalar> w = pi.derived();
    const Vector<Scalar> v = q.derived();
    Scalar acc = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (w[i] > Scalar(0)) {
            acc += w[i] * v[i] - xlogx(w[i]);
        }
    }
    return acc;
}

} // namespace bdistill
