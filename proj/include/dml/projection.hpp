#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dml/cdvae.hpp"
#include "dml/corpus.hpp"

namespace dml {

// Top-two principal axes of a point cloud. Each axis is signed so that its
// largest-magnitude component is positive.
struct PcaBasis {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> axes;
  std::array<double, 2> variances{};
};

PcaBasis fit_pca(const std::vector<std::vector<double>>& points);
std::array<double, 2> project(const PcaBasis& basis, std::span<const double> point);

struct ProjectionRow {
  std::string kind;  // "mode" or "caption"
  int mode_index = -1;
  double x = 0.0;
  double y = 0.0;
};

// Active codebook rows and the caption embeddings of `examples`, all projected
// with one basis fitted on their union. Unused entries are left out.
std::vector<ProjectionRow> project_modes_and_captions(const DmlModel& model,
                                                      const std::vector<TrainingExample>& examples,
                                                      AssignStrategy assign);

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows);
void write_projection_svg(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows);

}  // namespace dml
