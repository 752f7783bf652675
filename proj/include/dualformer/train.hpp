#pragma once

#include "dualformer/data.hpp"
#include "dualformer/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace dualformer {

/// Adam with decoupled weight decay; decay applies to tensors of rank >= 2.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  /// One update with learning rate `lr` from the accumulated gradients.
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor<S>> params_;
  std::vector<Vector<S>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero.
double warmup_cosine(long step, long total, long warmup, double peak);

struct TrainOptions {
  int epochs = 30;
  Index batch_size = 32;
  double lr = 2e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  /// Random horizontal flip and a shift of up to `max_shift` pixels (edge
  /// pixels repeat) on every training image.
  bool augment = true;
  Index max_shift = 3;
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // written after the last epoch when non-empty
  std::ostream* log = nullptr;  // human-readable progress, including wall-clock
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;            // mean training loss
  double train_accuracy = 0.0;  // on training batches, in training mode
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  double initial_val_accuracy = 0.0;
  std::vector<EpochStats> epochs;
  std::string checkpoint_path;

  double final_val_accuracy() const {
    return epochs.empty() ? initial_val_accuracy : epochs.back().val_accuracy;
  }
  double final_loss() const { return epochs.empty() ? 0.0 : epochs.back().loss; }
  /// epoch,loss,train_accuracy,val_accuracy; wall-clock is left out so equal
  /// seeds give byte-identical output.
  std::string csv() const;
};

/// Flips and shifts each image of a [B, C, S, S] batch in place.
void augment_batch(Tensor<float>& batch, Index max_shift, std::mt19937_64& rng);

/// Mini-batch training with cross-entropy and AdamW. Throws std::runtime_error
/// naming the epoch and step when the loss stops being finite.
template <typename S>
TrainReport train_toy(Model<S>& model, const Dataset& train, const Dataset& val, const TrainOptions& options);

/// Fraction of correctly classified images, inference mode.
template <typename S>
double evaluate(Model<S>& model, const Dataset& data, Index batch_size = 64);

/// Predicted class per image, inference mode.
template <typename S>
std::vector<int> predict(Model<S>& model, const Tensor<float>& images, Index batch_size = 64);

}  // namespace dualformer
