#pragma once

// Teacher-forced fine-tuning, the Adam training loop with plateau decay and
// per-component finite-difference gradient checks.

#include "speechsql/gradcheck.hpp"
#include "speechsql/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace speechsql {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.8;
  /// Epochs without validation improvement before the rate decays.
  int plateau_patience = 2;
  int batch_size = 256;
  int max_epochs = 30;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool no_sspt = false;
  bool no_sipt = false;
  bool freeze_text_encoder = false;
  /// Stop once validation accuracy reaches this value.
  std::optional<double> target_val_acc;
  /// Validate every k epochs (the last epoch always validates).
  int validate_every = 1;
  /// ckpt/{epoch}.bin|.json, best.bin and history.csv go here when set.
  std::filesystem::path out_dir;
  bool verbose = false;

  /// Published values: lr 1e-4, decay 0.8, batch 256.
  static TrainConfig paper();
  /// CPU-sized: batch 16, lr 1e-3.
  static TrainConfig desk();
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;   // mean per-instance loss over the epoch
  double val_query_acc = -1.0;  // -1 when not validated this epoch
  double seconds = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_acc = -1.0;
};

/// -sum log p(gold action) under teacher forcing. Throws GoldActionMasked.
double finetune_loss(Model& model, const Instance& instance);

/// Fraction of instances whose greedy prediction query-matches the gold SQL.
double query_accuracy(Model& model, const std::vector<Instance>& instances);

/// Trains `model` in place and leaves it holding the best-validation
/// weights. Deterministic for a fixed seed.
TrainReport train_loop(Model& model, const std::vector<Instance>& train_set, const std::vector<Instance>& val_set,
                       const TrainConfig& cfg);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

// ---- gradient checks ----------------------------------------------------

struct ToyConfig {
  int d_model = 4;
  std::uint64_t seed = 7;
};

/// Component ids accepted by grad_check.
const std::vector<std::string>& grad_check_components();

/// Finite-difference check over every parameter tensor of the component.
/// Throws UnknownComponent.
GradCheckResult grad_check(const std::string& component_id, const ToyConfig& toy = {}, double eps = 1e-5);

}  // namespace speechsql
