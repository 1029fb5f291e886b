#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dml/tensor.hpp"

namespace dml {

class InfeasibleAssignment : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major cost matrix with rows <= cols.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> cost;

  double at(std::size_t i, std::size_t j) const { return cost[i * cols + j]; }
};

struct AssignmentSolution {
  std::vector<std::size_t> column_of_row;
  double total_cost = 0.0;
};

// Minimum-cost injective assignment of every row to a distinct column
// (rectangular Kuhn-Munkres with potentials, O(rows^2 * cols)). Among optimal
// assignments the lexicographically smallest column vector is returned.
AssignmentSolution solve_assignment(const CostMatrix& m);

struct ModeAssignment {
  std::vector<std::size_t> entry_of_caption;
  std::vector<double> costs;  // Euclidean distance per pair
  double total_cost = 0.0;

  bool injective() const;
};

class Codebook {
 public:
  Codebook() = default;
  Codebook(Tensor entries) : entries_(std::move(entries)), usage_(entries_.size(0), 0) {}

  std::size_t size() const { return entries_.size(0); }
  std::size_t dim() const { return entries_.size(1); }
  const Tensor& entries() const { return entries_; }
  Tensor& entries() { return entries_; }
  std::span<const double> entry(std::size_t j) const { return entries_.values().subspan(j * dim(), dim()); }

  const std::vector<std::uint64_t>& usage_counts() const { return usage_; }
  void set_usage_counts(std::vector<std::uint64_t> counts);
  void record(const ModeAssignment& assignment);

 private:
  Tensor entries_;
  std::vector<std::uint64_t> usage_;
};

// k entries ~ N(0, 0.5), usage zeroed.
Codebook init_codebook(std::size_t k, std::size_t d_model, std::uint64_t seed);

// argmin_j ||e - entry_j||, ties to the lowest index.
std::size_t nearest_lookup(std::span<const double> e, const Codebook& codebook);

// Pairwise Euclidean distances between embeddings[n x d] and the codebook.
CostMatrix distance_matrix(const Tensor& embeddings, const Codebook& codebook);

// Injective minimum-total-distance assignment; n > k is infeasible.
ModeAssignment hungarian_assign(const Tensor& embeddings, const Codebook& codebook);
// Independent nearest-neighbour lookup per embedding (may repeat entries).
ModeAssignment nearest_assign(const Tensor& embeddings, const Codebook& codebook);

struct VqLosses {
  Tensor codebook_loss;    // ||sg[e] - q||^2, gradient to q only
  Tensor commitment_loss;  // beta * ||e - sg[q]||^2, gradient to e only
};

VqLosses vq_losses(const Tensor& e, const Tensor& q, double beta = 0.25);

struct UsageReport {
  std::size_t effective_modes = 0;
  std::vector<std::uint64_t> counts;
  std::vector<std::size_t> active_entries() const;
};

UsageReport usage_report(const Codebook& codebook);

}  // namespace dml
