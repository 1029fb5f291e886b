#include "dml/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace dml {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path Hungarian method on the sub-problem formed by
// `rows` x `cols` of the full matrix. Returns the optimal cost and fills
// `choice[r]` with an index into `cols`.
double hungarian_core(const CostMatrix& m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
                      std::vector<std::size_t>* choice) {
  const std::size_t n = rows.size(), k = cols.size();
  if (n == 0) {
    if (choice) choice->clear();
    return 0.0;
  }
  std::vector<double> u(n + 1, 0.0), v(k + 1, 0.0);
  std::vector<std::size_t> p(k + 1, 0), way(k + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(k + 1, kInf);
    std::vector<char> used(k + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= k; ++j) {
        if (used[j]) continue;
        const double cur = m.at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= k; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assigned(n, 0);
  for (std::size_t j = 1; j <= k; ++j)
    if (p[j] != 0) assigned[p[j] - 1] = j - 1;
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total += m.at(rows[r], cols[assigned[r]]);
  if (choice) *choice = std::move(assigned);
  return total;
}

bool nearly_equal(double a, double b) { return std::abs(a - b) <= 1e-12 * (1.0 + std::abs(a) + std::abs(b)); }

}  // namespace

AssignmentSolution solve_assignment(const CostMatrix& m) {
  if (m.rows > m.cols) {
    throw InfeasibleAssignment("cannot assign " + std::to_string(m.rows) + " items injectively to " +
                               std::to_string(m.cols) + " entries");
  }
  std::vector<std::size_t> rows(m.rows), cols(m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) rows[i] = i;
  for (std::size_t j = 0; j < m.cols; ++j) cols[j] = j;
  const double optimum = hungarian_core(m, rows, cols, nullptr);

  // Fix rows one at a time to the smallest column that keeps the optimum.
  AssignmentSolution sol;
  sol.column_of_row.resize(m.rows);
  double fixed = 0.0;
  std::vector<std::size_t> free_cols = cols;
  for (std::size_t i = 0; i < m.rows; ++i) {
    std::vector<std::size_t> rest(rows.begin() + static_cast<std::ptrdiff_t>(i) + 1, rows.end());
    bool placed = false;
    for (std::size_t c = 0; c < free_cols.size() && !placed; ++c) {
      std::vector<std::size_t> remaining = free_cols;
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(c));
      const double candidate = fixed + m.at(i, free_cols[c]) + hungarian_core(m, rest, remaining, nullptr);
      if (nearly_equal(candidate, optimum)) {
        sol.column_of_row[i] = free_cols[c];
        fixed += m.at(i, free_cols[c]);
        free_cols = std::move(remaining);
        placed = true;
      }
    }
    if (!placed) throw std::logic_error("assignment refinement lost the optimum");
  }
  sol.total_cost = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i) sol.total_cost += m.at(i, sol.column_of_row[i]);
  return sol;
}

bool ModeAssignment::injective() const {
  auto sorted = entry_of_caption;
  std::sort(sorted.begin(), sorted.end());
  return std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end();
}

// ---------------------------------------------------------------------------

void Codebook::set_usage_counts(std::vector<std::uint64_t> counts) {
  if (counts.size() != size()) throw std::invalid_argument("usage count vector does not match codebook size");
  usage_ = std::move(counts);
}

void Codebook::record(const ModeAssignment& assignment) {
  for (auto j : assignment.entry_of_caption) ++usage_.at(j);
}

Codebook init_codebook(std::size_t k, std::size_t d_model, std::uint64_t seed) {
  if (k == 0 || d_model == 0) throw std::invalid_argument("codebook needs k >= 1 and d >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.5);
  std::vector<double> values(k * d_model);
  for (auto& v : values) v = dist(rng);
  return Codebook(Tensor::from({k, d_model}, std::move(values), true));
}

namespace {

double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void check_embedding_width(const Tensor& embeddings, const Codebook& codebook) {
  if (embeddings.dim() != 2 || embeddings.size(1) != codebook.dim()) {
    throw DimensionError("embeddings " + shape_str(embeddings.shape()) + " do not match codebook width " +
                         std::to_string(codebook.dim()));
  }
}

}  // namespace

std::size_t nearest_lookup(std::span<const double> e, const Codebook& codebook) {
  if (e.size() != codebook.dim()) throw DimensionError("nearest_lookup: embedding width mismatch");
  std::size_t best = 0;
  double best_d = kInf;
  for (std::size_t j = 0; j < codebook.size(); ++j) {
    const double d = euclidean(e, codebook.entry(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

CostMatrix distance_matrix(const Tensor& embeddings, const Codebook& codebook) {
  check_embedding_width(embeddings, codebook);
  const std::size_t n = embeddings.size(0), k = codebook.size(), d = codebook.dim();
  CostMatrix m{n, k, std::vector<double>(n * k)};
  for (std::size_t i = 0; i < n; ++i) {
    auto e = embeddings.values().subspan(i * d, d);
    for (std::size_t j = 0; j < k; ++j) m.cost[i * k + j] = euclidean(e, codebook.entry(j));
  }
  return m;
}

ModeAssignment hungarian_assign(const Tensor& embeddings, const Codebook& codebook) {
  check_embedding_width(embeddings, codebook);
  if (embeddings.size(0) > codebook.size()) {
    throw InfeasibleAssignment("hungarian_assign: " + std::to_string(embeddings.size(0)) +
                               " captions exceed codebook size " + std::to_string(codebook.size()));
  }
  const auto m = distance_matrix(embeddings, codebook);
  const auto sol = solve_assignment(m);
  ModeAssignment out;
  out.entry_of_caption = sol.column_of_row;
  for (std::size_t i = 0; i < m.rows; ++i) out.costs.push_back(m.at(i, sol.column_of_row[i]));
  out.total_cost = sol.total_cost;
  return out;
}

ModeAssignment nearest_assign(const Tensor& embeddings, const Codebook& codebook) {
  check_embedding_width(embeddings, codebook);
  const std::size_t n = embeddings.size(0), d = codebook.dim();
  ModeAssignment out;
  for (std::size_t i = 0; i < n; ++i) {
    auto e = embeddings.values().subspan(i * d, d);
    const auto j = nearest_lookup(e, codebook);
    out.entry_of_caption.push_back(j);
    out.costs.push_back(euclidean(e, codebook.entry(j)));
    out.total_cost += out.costs.back();
  }
  return out;
}

VqLosses vq_losses(const Tensor& e, const Tensor& q, double beta) {
  if (e.shape() != q.shape()) {
    throw DimensionError("vq_losses: " + shape_str(e.shape()) + " vs " + shape_str(q.shape()));
  }
  return VqLosses{squared_distance(detach(e), q), scale(squared_distance(e, detach(q)), beta)};
}

std::vector<std::size_t> UsageReport::active_entries() const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < counts.size(); ++j)
    if (counts[j] > 0) out.push_back(j);
  return out;
}

UsageReport usage_report(const Codebook& codebook) {
  UsageReport r;
  r.counts = codebook.usage_counts();
  r.effective_modes = static_cast<std::size_t>(
      std::count_if(r.counts.begin(), r.counts.end(), [](std::uint64_t c) { return c > 0; }));
  return r;
}

}  // namespace dml
