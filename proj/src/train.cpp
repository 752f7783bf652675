#include "dualformer/train.hpp"

#include "dualformer/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace dualformer {

namespace {

template <typename S>
Tensor<S> as_scalar(const Tensor<float>& t) {
  if constexpr (std::is_same_v<S, float>)
    return t;
  else
    return Tensor<S>::from_vector(t.shape(), t.data().template cast<S>());
}

template <typename S>
int argmax_row(const Tensor<S>& logits, Index row) {
  const Index C = logits.dim(1);
  Index best = 0;
  for (Index c = 1; c < C; ++c)
    if (logits[row * C + c] > logits[row * C + best]) best = c;
  return static_cast<int>(best);
}

}  // namespace

template <typename S>
AdamW<S>::AdamW(std::vector<Tensor<S>> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Vector<S>::Zero(p.numel()));
    v_.push_back(Vector<S>::Zero(p.numel()));
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<S>& p = params_[i];
    if (!p.has_grad()) continue;
    const Vector<S>& g = p.grad();
    m_[i] = S(beta1_) * m_[i] + S(1 - beta1_) * g;
    v_[i] = S(beta2_) * v_[i] + S(1 - beta2_) * g.cwiseProduct(g);
    Vector<S>& w = p.mutable_data();
    if (p.rank() >= 2) w *= S(1 - lr * weight_decay_);
    w.array() -= S(lr) * (m_[i].array() / S(c1)) / ((v_[i].array() / S(c2)).sqrt() + S(eps_));
  }
}

template <typename S>
void AdamW<S>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void augment_batch(Tensor<float>& batch, Index max_shift, std::mt19937_64& rng) {
  const Index B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  std::uniform_int_distribution<Index> shift(-max_shift, max_shift);
  std::bernoulli_distribution flip(0.5);
  Vector<float>& v = batch.mutable_data();
  Vector<float> src;
  for (Index b = 0; b < B; ++b) {
    const bool mirror = flip(rng);
    const Index dy = shift(rng), dx = shift(rng);
    src = v.segment(b * C * H * W, C * H * W);
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          const Index sy = std::clamp<Index>(y - dy, 0, H - 1);
          Index sx = std::clamp<Index>(x - dx, 0, W - 1);
          if (mirror) sx = W - 1 - sx;
          v[((b * C + c) * H + y) * W + x] = src[(c * H + sy) * W + sx];
        }
  }
}

double warmup_cosine(long step, long total, long warmup, double peak) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max(1L, total - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return 0.5 * peak * (1.0 + std::cos(M_PI * progress));
}

std::string TrainReport::csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,loss,train_accuracy,val_accuracy\n";
  os << 0 << ",," << "," << initial_val_accuracy << '\n';
  for (const auto& e : epochs) os << e.epoch << ',' << e.loss << ',' << e.train_accuracy << ',' << e.val_accuracy << '\n';
  return os.str();
}

template <typename S>
std::vector<int> predict(Model<S>& model, const Tensor<float>& images, Index batch_size) {
  NoGradGuard no_grad;
  const ForwardContext ctx;
  const Index N = images.dim(0), per = images.numel() / N;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(N));
  for (Index begin = 0; begin < N; begin += batch_size) {
    const Index count = std::min(batch_size, N - begin);
    Shape shape = images.shape();
    shape[0] = count;
    const Tensor<float> batch = Tensor<float>::from_vector(shape, images.data().segment(begin * per, count * per));
    const Tensor<S> logits = forward(model, as_scalar<S>(batch), ctx);
    for (Index r = 0; r < count; ++r) out.push_back(argmax_row(logits, r));
  }
  return out;
}

template <typename S>
double evaluate(Model<S>& model, const Dataset& data, Index batch_size) {
  const std::vector<int> pred = predict(model, data.images, batch_size);
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename S>
TrainReport train_toy(Model<S>& model, const Dataset& train, const Dataset& val, const TrainOptions& options) {
  if (train.size() < 1 || val.size() < 1) throw ContractError("training needs non-empty train and validation sets");
  if (options.batch_size < 2) throw ContractError("batch size must be >= 2 (batch normalization)");
  using Clock = std::chrono::steady_clock;
  TrainReport report;
  report.initial_val_accuracy = evaluate(model, val);

  std::mt19937_64 rng(options.seed);
  std::mt19937_64 hash_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  ForwardContext ctx;
  ctx.training = true;
  ctx.rng = &hash_rng;

  AdamW<S> optimizer(model.parameters(), options.weight_decay);
  const Index N = train.size();
  const long steps_per_epoch = static_cast<long>(N / options.batch_size);
  if (steps_per_epoch < 1) throw ContractError("training set smaller than one batch");
  const long total = steps_per_epoch * options.epochs;
  const long warmup = std::min(total, steps_per_epoch * options.warmup_epochs);
  std::vector<Index> order(static_cast<std::size_t>(N));
  long step = 0;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::vector<Index> idx(order.begin() + s * options.batch_size,
                                   order.begin() + (s + 1) * options.batch_size);
      const std::vector<int> labels = train.gather_labels(idx);
      Tensor<float> images = train.gather(idx);
      if (options.augment) augment_batch(images, options.max_shift, rng);
      const Tensor<S> logits = forward(model, as_scalar<S>(images), ctx);
      const Tensor<S> loss = cross_entropy(logits, std::span<const int>(labels));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(s) + " (loss " + std::to_string(value) + ")");
      optimizer.zero_grad();
      backward(loss);
      optimizer.step(warmup_cosine(step, total, warmup, options.lr));
      loss_sum += value;
      for (std::size_t r = 0; r < labels.size(); ++r) correct += argmax_row(logits, static_cast<Index>(r)) == labels[r];
      seen += static_cast<Index>(labels.size());
    }
    EpochStats e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(steps_per_epoch);
    e.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    e.val_accuracy = evaluate(model, val);
    e.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    report.epochs.push_back(e);
    if (options.log)
      *options.log << "epoch " << epoch << "  loss " << e.loss << "  train_acc " << e.train_accuracy
                   << "  val_acc " << e.val_accuracy << "  (" << e.seconds << " s)\n";
  }
  if (!options.checkpoint_path.empty()) {
    save_checkpoint(model, options.checkpoint_path);
    report.checkpoint_path = options.checkpoint_path;
  }
  return report;
}

template class AdamW<float>;
template class AdamW<double>;
template TrainReport train_toy(Model<float>&, const Dataset&, const Dataset&, const TrainOptions&);
template TrainReport train_toy(Model<double>&, const Dataset&, const Dataset&, const TrainOptions&);
template double evaluate(Model<float>&, const Dataset&, Index);
template double evaluate(Model<double>&, const Dataset&, Index);
template std::vector<int> predict(Model<float>&, const Tensor<float>&, Index);
template std::vector<int> predict(Model<double>&, const Tensor<float>&, Index);

}  // namespace dualformer
