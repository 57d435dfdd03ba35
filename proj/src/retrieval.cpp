#include "dcsd/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "dcsd/error.hpp"
#include "json.hpp"

namespace dcsd {

double RetrievalReport::rank(std::size_t k) const {
  if (cmc.empty() || k == 0) return 0.0;
  return cmc[std::min(k, cmc.size()) - 1];
}

Tensor extract_embeddings(Model& model, const Corpus& corpus, const std::vector<std::size_t>& indices,
                          std::size_t batch_size) {
  if (indices.empty()) throw ShapeError("extract_embeddings: empty sample set");
  if (batch_size == 0) throw ConfigError("extract_embeddings: batch_size must be >= 1");
  NoGradGuard no_grad;
  const std::size_t d = model.spec().embedding_dim;
  Tensor out({indices.size(), d}, 0.0);
  auto dst = out.mutable_data();
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    const std::vector<std::size_t> chunk(indices.begin() + start, indices.begin() + end);
    const Tensor e = model.forward(stack_images(corpus, chunk), Mode::eval).embedding;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const double* row = e.data().data() + i * d;
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
      const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
      for (std::size_t j = 0; j < d; ++j) dst[(start + i) * d + j] = row[j] * inv;
    }
  }
  return out;
}

std::vector<RetrievalItem> retrieval_items(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  std::vector<RetrievalItem> items;
  items.reserve(indices.size());
  for (std::size_t i : indices) items.push_back({corpus.samples.at(i).pid, corpus.samples.at(i).global_camera});
  return items;
}

namespace {

void check_inputs(const Tensor& q, const std::vector<RetrievalItem>& qi, const Tensor& g,
                  const std::vector<RetrievalItem>& gi) {
  if (q.rank() != 2 || g.rank() != 2) throw ShapeError("retrieval: embeddings must be [N,D]");
  if (q.dim(1) != g.dim(1))
    throw ShapeError("retrieval: query dim " + std::to_string(q.dim(1)) + " differs from gallery dim " +
                     std::to_string(g.dim(1)));
  if (q.dim(0) != qi.size() || g.dim(0) != gi.size()) throw ShapeError("retrieval: labels do not match embeddings");
}

double distance(const Tensor& q, std::size_t i, const Tensor& g, std::size_t j) {
  const std::size_t d = q.dim(1);
  const double* a = q.data().data() + i * d;
  const double* b = g.data().data() + j * d;
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

bool junk(const RetrievalItem& q, const RetrievalItem& g, bool cross_camera) {
  return cross_camera && q.pid == g.pid && q.camera == g.camera;
}

RetrievalReport finish(RetrievalReport r, const std::vector<std::size_t>& hit_counts) {
  const std::size_t scored = r.num_query - r.excluded_queries;
  r.cmc.assign(r.num_gallery, 0.0);
  if (scored > 0) {
    for (std::size_t k = 0; k < r.num_gallery; ++k) r.cmc[k] = static_cast<double>(hit_counts[k]) / scored;
    double sum = 0.0;
    for (double ap : r.per_query_ap)
      if (!std::isnan(ap)) sum += ap;
    r.map = sum / scored;
  }
  return r;
}

}  // namespace

RetrievalReport evaluate(const Tensor& query, const std::vector<RetrievalItem>& qi, const Tensor& gallery,
                         const std::vector<RetrievalItem>& gi, bool cross_camera) {
  check_inputs(query, qi, gallery, gi);
  RetrievalReport r;
  r.cross_camera = cross_camera;
  r.num_query = qi.size();
  r.num_gallery = gi.size();
  // hits_at[k]: scored queries whose first match is at rank k+1
  std::vector<std::size_t> hits_at(gi.size() + 1, 0);
  std::vector<std::size_t> order(gi.size());
  std::vector<double> dist(gi.size());
  for (std::size_t i = 0; i < qi.size(); ++i) {
    for (std::size_t j = 0; j < gi.size(); ++j) dist[j] = distance(query, i, gallery, j);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::size_t rank = 0, found = 0, first = 0;
    double precision_sum = 0.0;
    for (std::size_t j : order) {
      if (junk(qi[i], gi[j], cross_camera)) continue;
      ++rank;
      if (gi[j].pid != qi[i].pid) continue;
      ++found;
      if (first == 0) first = rank;
      precision_sum += static_cast<double>(found) / rank;
    }
    if (found == 0) {
      ++r.excluded_queries;
      r.per_query_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      r.first_match_rank.push_back(0);
      continue;
    }
    r.per_query_ap.push_back(precision_sum / found);
    r.first_match_rank.push_back(first);
    ++hits_at[first - 1];
  }
  std::vector<std::size_t> cumulative(gi.size(), 0);
  std::size_t acc = 0;
  for (std::size_t k = 0; k < gi.size(); ++k) cumulative[k] = acc += hits_at[k];
  return finish(std::move(r), cumulative);
}

RetrievalReport evaluate_brute_oracle(const Tensor& query, const std::vector<RetrievalItem>& qi, const Tensor& gallery,
                                      const std::vector<RetrievalItem>& gi, bool cross_camera) {
  check_inputs(query, qi, gallery, gi);
  RetrievalReport r;
  r.cross_camera = cross_camera;
  r.num_query = qi.size();
  r.num_gallery = gi.size();
  std::vector<std::size_t> within(gi.size(), 0);
  for (std::size_t i = 0; i < qi.size(); ++i) {
    // rank of every kept gallery item = 1 + number of kept items before it
    std::vector<double> dist(gi.size());
    for (std::size_t j = 0; j < gi.size(); ++j) dist[j] = distance(query, i, gallery, j);
    std::vector<std::size_t> rank_of(gi.size(), 0);
    for (std::size_t j = 0; j < gi.size(); ++j) {
      if (junk(qi[i], gi[j], cross_camera)) continue;
      std::size_t before = 0;
      for (std::size_t m = 0; m < gi.size(); ++m) {
        if (m == j || junk(qi[i], gi[m], cross_camera)) continue;
        if (dist[m] < dist[j] || (dist[m] == dist[j] && m < j)) ++before;
      }
      rank_of[j] = before + 1;
    }
    std::vector<std::size_t> relevant_ranks;
    for (std::size_t j = 0; j < gi.size(); ++j)
      if (rank_of[j] > 0 && gi[j].pid == qi[i].pid) relevant_ranks.push_back(rank_of[j]);
    if (relevant_ranks.empty()) {
      ++r.excluded_queries;
      r.per_query_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      r.first_match_rank.push_back(0);
      continue;
    }
    std::sort(relevant_ranks.begin(), relevant_ranks.end());
    double precision_sum = 0.0;
    for (std::size_t h = 0; h < relevant_ranks.size(); ++h)
      precision_sum += static_cast<double>(h + 1) / relevant_ranks[h];
    r.per_query_ap.push_back(precision_sum / relevant_ranks.size());
    r.first_match_rank.push_back(relevant_ranks.front());
    for (std::size_t k = 1; k <= gi.size(); ++k) within[k - 1] += relevant_ranks.front() <= k;
  }
  return finish(std::move(r), within);
}

std::string report_to_json(const RetrievalReport& r) {
  nlohmann::ordered_json j;
  j["rank1"] = r.rank(1);
  j["rank5"] = r.rank(5);
  j["rank10"] = r.rank(10);
  j["map"] = r.map;
  j["num_query"] = r.num_query;
  j["num_gallery"] = r.num_gallery;
  j["excluded_queries"] = r.excluded_queries;
  j["protocol"] = {{"cross_camera", r.cross_camera}, {"distance", "euclidean_on_normalized"}};
  return j.dump(2) + "\n";
}

void write_per_query_csv(std::ostream& os, const RetrievalReport& r, const std::vector<RetrievalItem>& qi) {
  os << "query,pid,camera,ap,first_match_rank\n";
  const auto old = os.precision(17);
  for (std::size_t i = 0; i < qi.size(); ++i) {
    os << i << ',' << qi[i].pid << ',' << qi[i].camera << ',';
    if (std::isnan(r.per_query_ap[i])) os << "excluded";
    else os << r.per_query_ap[i];
    os << ',' << r.first_match_rank[i] << '\n';
  }
  os.precision(old);
}

}  // namespace dcsd
