#pragma once

// SimGCD and HiLo training loops, evaluation and bound reporting.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hilo/bounds.hpp"
#include "hilo/clustering.hpp"
#include "hilo/curriculum.hpp"
#include "hilo/encoder.hpp"
#include "hilo/losses.hpp"
#include "hilo/patchmix.hpp"
#include "hilo/synthdata.hpp"

namespace hilo {

enum class Mode { simgcd, hilo };
Mode mode_from_string(const std::string& name);
std::string to_string(Mode mode);

struct Ablation {
  bool no_mi = false;
  bool no_curriculum = false;
  bool no_patchmix = false;
  bool deep_only = false;     // both heads read the last block
  bool shallow_only = false;  // both heads read the first block

  void validate() const;
  bool operator==(const Ablation&) const = default;
};

struct TrainConfig {
  Mode mode = Mode::hilo;
  Ablation ablation;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t eval_every = 10;
  double aug_jitter = 0.05;  // view noise std, relative to the data std
  double aug_mask = 0.1;     // probability of zeroing a patch in a view
  BetaParams beta;
  std::size_t mi_block = 128;  // evaluation batch for the MI estimate

  void validate() const;
};

// Every setting needed for one training run except the seed.
struct RunConfig {
  TaskConfig task;
  EncoderConfig encoder;
  LossConfig loss;
  CurriculumConfig curriculum;
  TrainConfig train;
  BoundsConfig bounds;

  // Encoder config with the tap layers implied by the ablation flags.
  EncoderConfig effective_encoder() const;
  void validate() const;
};

// lr0 * (1 + cos(pi t / T)) / 2.
double cosine_lr(double lr0, std::size_t t, std::size_t total);

struct EvalReport {
  AccReport seen;    // unlabelled samples of the labelled domain
  AccReport unseen;  // samples of every other domain
  AccReport labelled;
  double err_a = 0.0;  // domain-0 samples classified as unseen
  double err_b = 0.0;  // other-domain samples classified as seen
  double mi_estimate = 0.0;
  BoundReport bounds;
};

EvalReport evaluate(const Dataset& data, const EncoderState& state, const RunConfig& cfg);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  std::size_t steps = 0;
  std::size_t unseen_drawn = 0;  // draws from the predicted unseen-domain pool
  LossBundle mean;              // per-step average
  std::vector<double> step_totals;
};

class Trainer {
 public:
  Trainer(const Dataset& data, const RunConfig& cfg, std::uint64_t seed);

  // Runs epoch number epoch() + 1.
  EpochStats train_epoch();
  EvalReport evaluate() const { return hilo::evaluate(data_, state_, cfg_); }

  std::size_t epoch() const noexcept { return epoch_; }
  const EncoderState& state() const noexcept { return state_; }
  EncoderState& state() noexcept { return state_; }
  const DomainPartition& partition() const noexcept { return partition_; }

  // Random part of a step: augmented views and mixing plans.
  struct StepInputs {
    std::vector<std::size_t> batch;
    Tensor views;  // [2B, P, input_dim], view-major
    std::vector<MixSpec> specs;
    bool mixed = false;
  };
  StepInputs draw_step(const std::vector<std::size_t>& batch);
  // Deterministic given the inputs. Without reversal the objective equals the
  // reported total and its gradient.
  LossResult step_loss(const BoundEncoder& enc, const StepInputs& in, bool critic_reversal = true) const;

  // Loss of one step on the given sample indices, consuming the same random
  // draws as a training step but without updating parameters.
  LossResult probe_loss(Tape& tape, const std::vector<std::size_t>& batch);

 private:
  void apply_update(const EncoderParams<Tensor>& grads, double lr);

  const Dataset& data_;
  RunConfig cfg_;
  EncoderState state_;
  EncoderParams<Tensor> velocity_;
  std::mt19937_64 rng_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  double data_std_ = 1.0;
  DomainPartition partition_;
  std::vector<bool> labelled_;
};

struct EvalRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBundle loss;
  EvalReport eval;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<EvalRow> rows;  // one per eval point; the last row is the final epoch
};

// Trains for cfg.train.epochs, evaluating every eval_every epochs and at the end.
RunResult train_run(const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                    const std::function<void(const EvalRow&)>& on_row = {});

}  // namespace hilo
