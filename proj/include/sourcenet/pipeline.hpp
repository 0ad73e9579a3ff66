#pragma once

// Glue shared by the command-line tool and the acceptance runs: split,
// normalize, train a stage, evaluate a held-out split.

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sourcenet/evalx.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/nn/checkpoint.hpp"
#include "sourcenet/nn/model.hpp"
#include "sourcenet/train.hpp"

namespace sourcenet {

struct PreparedData {
  std::vector<EventRecord> records;  // normalized
  Split split;
  NormStats stats;
};

/// Splits by the stage seed, fits normalization on the training part (unless
/// `stats` is given, as when fine-tuning under pretraining statistics) and
/// normalizes every record.
inline PreparedData prepare(std::vector<EventRecord> records, const TrainConfig& cfg, WaveNorm mode,
                            const std::optional<NormStats>& stats = std::nullopt) {
  if (records.empty()) throw EmptySplit("dataset is empty");
  PreparedData p;
  p.split = split_indices(records.size(), cfg.split, cfg.seed);
  if (stats) {
    p.stats = *stats;
  } else {
    std::vector<EventRecord> train;
    for (auto i : p.split.train) train.push_back(records[i]);
    p.stats = fit_stats(train, mode);
  }
  apply_norm(std::span<EventRecord>(records), p.stats);
  p.records = std::move(records);
  return p;
}

inline nlohmann::json stage_meta(const PreparedData& p) {
  return {{"norm", nn::norm_to_json(p.stats)},
          {"n_train", p.split.train.size()},
          {"n_val", p.split.val.size()},
          {"n_test", p.split.test.size()}};
}

inline nn::Model<float> init_model(const nn::ModelConfig& mc, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x1417});
  return nn::Model<float>(mc, rng);
}

inline std::vector<EventRecord> subset(std::span<const EventRecord> data, const std::vector<std::size_t>& idx) {
  std::vector<EventRecord> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

/// Normalization statistics stored with a checkpoint.
inline NormStats checkpoint_norm(const nn::Checkpoint& ck) {
  if (!ck.meta.contains("norm")) throw FormatError("checkpoint carries no normalization statistics");
  return nn::norm_from_json(ck.meta.at("norm"));
}

/// Copy of raw records normalized with the checkpoint's statistics.
inline std::vector<EventRecord> normalized_for(const nn::Checkpoint& ck, std::vector<EventRecord> records) {
  apply_norm(std::span<EventRecord>(records), checkpoint_norm(ck));
  return records;
}

}  // namespace sourcenet
