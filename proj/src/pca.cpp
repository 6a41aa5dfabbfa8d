#include "dpmpb/pca.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "dpmpb/common.hpp"

namespace dpmpb::pca {

Projection project_2d(const std::vector<std::pair<std::string, Eigen::VectorXd>>& rows) {
  if (rows.empty()) throw DataError("pca: no rows");
  const Eigen::Index dim = rows.front().second.size();
  for (const auto& [name, v] : rows)
    if (v.size() != dim) throw DataError("pca: inconsistent dimensions");

  Projection out;
  out.mean = Eigen::VectorXd::Zero(dim);
  for (const auto& [name, v] : rows) out.mean += v;
  out.mean /= static_cast<double>(rows.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& [name, v] : rows) {
    const Eigen::VectorXd c = v - out.mean;
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(rows.size());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("pca: eigendecomposition failed");

  out.components = Eigen::MatrixXd::Zero(dim, 2);
  // Eigenvalues come back ascending; take the top one or two.
  const int n_comp = static_cast<int>(std::min<Eigen::Index>(2, dim));
  for (int k = 0; k < n_comp; ++k)
    out.components.col(k) = solver.eigenvectors().col(dim - 1 - k);
  // Sign convention: the largest-|loading| entry of each component positive;
  // ties resolved by the lower index.
  for (int k = 0; k < n_comp; ++k) {
    Eigen::Index at = 0;
    out.components.col(k).cwiseAbs().maxCoeff(&at);
    if (out.components(at, k) < 0.0) out.components.col(k) = -out.components.col(k);
  }

  out.points.resize(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.names.push_back(rows[i].first);
    out.points.row(static_cast<Eigen::Index>(i)) = apply(out, rows[i].second).transpose();
  }
  return out;
}

Eigen::Vector2d apply(const Projection& projection, const Eigen::VectorXd& v) {
  return projection.components.transpose() * (v - projection.mean);
}

}  // namespace dpmpb::pca
