#include "dml/projection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <Eigen/Dense>

namespace dml {

PcaBasis fit_pca(const std::vector<std::vector<double>>& points) {
  if (points.size() < 2) throw std::invalid_argument("PCA needs at least two points");
  const auto d = static_cast<Eigen::Index>(points[0].size());
  if (d < 2) throw std::invalid_argument("PCA needs at least two dimensions");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(points.size()), d);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (static_cast<Eigen::Index>(points[i].size()) != d) throw DimensionError("PCA points differ in dimension");
    for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = points[i][static_cast<std::size_t>(j)];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(points.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  PcaBasis b;
  b.mean.assign(mu.data(), mu.data() + d);
  for (int k = 0; k < 2; ++k) {
    const Eigen::Index col = d - 1 - k;  // eigenvalues ascend
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    b.axes[static_cast<std::size_t>(k)].assign(v.data(), v.data() + d);
    b.variances[static_cast<std::size_t>(k)] = solver.eigenvalues()(col);
  }
  return b;
}

std::array<double, 2> project(const PcaBasis& basis, std::span<const double> point) {
  if (point.size() != basis.mean.size()) throw DimensionError("projected point has the wrong dimension");
  std::array<double, 2> out{};
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < point.size(); ++j) out[k] += (point[j] - basis.mean[j]) * basis.axes[k][j];
  return out;
}

std::vector<ProjectionRow> project_modes_and_captions(const DmlModel& model,
                                                      const std::vector<TrainingExample>& examples,
                                                      AssignStrategy assign) {
  std::vector<std::vector<double>> points;
  std::vector<ProjectionRow> rows;
  const auto active = usage_report(model.codebook()).active_entries();
  for (auto j : active) {
    const auto e = model.codebook().entry(j);
    points.emplace_back(e.begin(), e.end());
    rows.push_back({"mode", static_cast<int>(j), 0.0, 0.0});
  }
  for (const auto& ex : examples) {
    NoGradGuard guard;
    const auto a = assign_modes(model, ex.captions, assign);
    for (std::size_t i = 0; i < ex.captions.size(); ++i) {
      const auto e = encode_mode(model, ex.captions[i]);
      points.emplace_back(e.values().begin(), e.values().end());
      rows.push_back({"caption", static_cast<int>(a.entry_of_caption[i]), 0.0, 0.0});
    }
  }
  const auto basis = fit_pca(points);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto p = project(basis, points[i]);
    rows[i].x = p[0];
    rows[i].y = p[1];
  }
  return rows;
}

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "kind,mode_index,x,y\n";
  for (const auto& r : rows) out << r.kind << ',' << r.mode_index << ',' << r.x << ',' << r.y << '\n';
}

void write_projection_svg(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("nothing to plot");
  double x0 = rows[0].x, x1 = rows[0].x, y0 = rows[0].y, y1 = rows[0].y;
  for (const auto& r : rows) {
    x0 = std::min(x0, r.x);
    x1 = std::max(x1, r.x);
    y0 = std::min(y0, r.y);
    y1 = std::max(y1, r.y);
  }
  const double size = 600.0, pad = 20.0;
  const double sx = (size - 2 * pad) / std::max(1e-12, x1 - x0);
  const double sy = (size - 2 * pad) / std::max(1e-12, y1 - y0);
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                  "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (const auto& r : rows) {
    const double cx = pad + (r.x - x0) * sx;
    const double cy = size - pad - (r.y - y0) * sy;
    const char* color = palette[static_cast<std::size_t>(std::max(0, r.mode_index)) % 10];
    if (r.kind == "mode") {
      out << "<rect x=\"" << cx - 5 << "\" y=\"" << cy - 5 << "\" width=\"10\" height=\"10\" fill=\"" << color
          << "\" stroke=\"black\"/>\n";
    } else {
      out << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"2\" fill=\"" << color
          << "\" fill-opacity=\"0.5\"/>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace dml
