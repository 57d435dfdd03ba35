#pragma once

// Query/gallery retrieval scoring: CMC and mAP with optional cross-camera
// junk removal. Distances are Euclidean on the given (unit-norm) embeddings;
// equal distances are ordered by gallery index.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dcsd/backbone.hpp"
#include "dcsd/datagen.hpp"

namespace dcsd {

struct RetrievalItem {
  std::int64_t pid = 0;
  std::int64_t camera = 0;  // global camera id
};

struct RetrievalReport {
  // cmc[k-1]: fraction of scored queries whose first match is within rank k,
  // for k = 1..num_gallery.
  std::vector<double> cmc;
  double map = 0.0;
  // One entry per query; NaN for excluded queries.
  std::vector<double> per_query_ap;
  // 1-based rank of the first valid match; 0 for excluded queries.
  std::vector<std::size_t> first_match_rank;
  bool cross_camera = true;
  std::size_t num_query = 0;
  std::size_t num_gallery = 0;
  std::size_t excluded_queries = 0;

  double rank(std::size_t k) const;  // clamps k to the CMC length
};

// Eval-mode post-neck embeddings, one L2-normalized row per index.
Tensor extract_embeddings(Model& model, const Corpus& corpus, const std::vector<std::size_t>& indices,
                          std::size_t batch_size = 128);

std::vector<RetrievalItem> retrieval_items(const Corpus& corpus, const std::vector<std::size_t>& indices);

RetrievalReport evaluate(const Tensor& query, const std::vector<RetrievalItem>& query_items, const Tensor& gallery,
                         const std::vector<RetrievalItem>& gallery_items, bool cross_camera);

// Reference implementation by explicit pairwise rank counting.
RetrievalReport evaluate_brute_oracle(const Tensor& query, const std::vector<RetrievalItem>& query_items,
                                      const Tensor& gallery, const std::vector<RetrievalItem>& gallery_items,
                                      bool cross_camera);

// {rank1, rank5, rank10, map, num_query, num_gallery, excluded_queries, protocol}
std::string report_to_json(const RetrievalReport& report);
// query,pid,camera,ap,first_match_rank
void write_per_query_csv(std::ostream& os, const RetrievalReport& report, const std::vector<RetrievalItem>& query_items);

}  // namespace dcsd
