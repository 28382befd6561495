#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uad/patching.hpp"

namespace uad {

enum class LayerKind { conv, tconv, gelu, batch_norm };

// no-padding convolution stack element; gelu/batch_norm ignore the kernel
// fields
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int kh = 0, kw = 0;
  int sh = 1, sw = 1;
  int filters = 0;
};

LayerSpec conv_spec(int k, int s, int filters);
LayerSpec tconv_spec(int k, int s, int filters);
LayerSpec gelu_spec();
LayerSpec batch_norm_spec();

struct Shape3 {
  int c = 0, h = 0, w = 0;
  std::int64_t size() const { return static_cast<std::int64_t>(c) * h * w; }
  bool operator==(const Shape3&) const = default;
};

// conv: k[filter][in_channel]; tconv: k[in_channel][filter]
struct ConvWeights {
  std::vector<std::vector<Eigen::MatrixXd>> k;
  Eigen::VectorXd b;
};

struct BatchNormWeights {
  Eigen::VectorXd scale, shift;        // trainable
  Eigen::VectorXd run_mean, run_var;   // running statistics (not packed)
};

struct Stack {
  std::vector<LayerSpec> specs;
  std::vector<Shape3> shapes;  // shapes[i] = input of layer i; back() = output
  std::vector<ConvWeights> conv;
  std::vector<BatchNormWeights> bn;
};

// Siamese auto-encoder: a shared-weight encoder/decoder pair trained with
// reconstruction error plus a latent cosine-similarity term of weight alpha.
struct SaeModel {
  Shape3 input;
  double alpha = 1e-3;
  double bn_momentum = 0.9;
  double bn_eps = 1e-12;
  double cos_eps = 1e-12;
  Stack encoder, decoder;

  int latent_dim() const { return static_cast<int>(encoder.shapes.back().size()); }
  std::int64_t num_params() const;
  Eigen::VectorXd pack() const;
  void unpack(const Eigen::VectorXd& theta);
  // layer label owning flat parameter index i (for error reporting)
  std::string param_layer(std::int64_t i) const;
};

// Validates the stacks against the input shape (strides must divide evenly,
// all spatial sizes >= 1) and requires decode(encode(x)) to reproduce the
// input shape.
SaeModel make_sae(const Shape3& input, std::vector<LayerSpec> encoder,
                  std::vector<LayerSpec> decoder, double alpha);

// Symmetric transposed-convolution mirror of an encoder; the final layer is
// a bare tconv so the output range is unconstrained.
std::vector<LayerSpec> mirror_decoder(const Shape3& input, const std::vector<LayerSpec>& encoder);

// 4 conv blocks (5,5)/(3,3)/(3,3)/(3,3), strides (1,1,3,1), filters
// (3,4,12,16), GeLU + batch norm per block, mirrored decoder; maps a
// p x p x channels patch to a 16-dimensional latent for p = 15.
SaeModel make_reference_sae(int p, int channels, double alpha);

// uniform fan-in init, seeded
void init_weights(SaeModel& m, std::uint64_t seed);

// inference mode (batch norm uses running statistics)
Eigen::VectorXd encode(const SaeModel& m, const Image& x);
Eigen::VectorXd encode(const SaeModel& m, const Patch& x);
Image decode(const SaeModel& m, const Eigen::VectorXd& z);
double recon_error(const SaeModel& m, const Image& x);

struct PairBatchLoss {
  double loss = 0.0;
  double recon = 0.0;    // mean squared reconstruction term
  double cosine = 0.0;   // mean cosine similarity across pairs
  Eigen::VectorXd grad;  // d loss / d theta, pack() order
};

// Training-mode loss and exact gradients on a batch of pairs (mean per-pair
// loss). update_running controls the batch-norm running statistics side
// effect.
PairBatchLoss sae_loss(SaeModel& m, const std::vector<PatchPair>& batch, bool update_running);
PairBatchLoss sae_loss(SaeModel& m, const PatchPair& pair, bool update_running = false);

struct AdamState {
  std::int64_t t = 0;
  Eigen::VectorXd m, v;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState for_size(std::int64_t n, double lr = 1e-3, double beta1 = 0.9,
                            double beta2 = 0.999, double eps = 1e-8);
};

// standard bias-corrected Adam update
void adam_step(AdamState& state, Eigen::VectorXd& weights, const Eigen::VectorXd& grads);

struct SaeTrainConfig {
  int epochs = 20;
  int batch_pairs = 1000;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

// Adam over shuffled batches; returns the per-epoch loss trace and leaves
// the weights of the epoch with minimal validation loss in the model.
std::vector<EpochStats> train_sae(SaeModel& m, const std::vector<PatchPair>& train_pairs,
                                  const std::vector<PatchPair>& val_pairs,
                                  const SaeTrainConfig& cfg);

std::string loss_trace_csv(const std::vector<EpochStats>& trace);

void save_sae(const SaeModel& m, const std::filesystem::path& path);
SaeModel load_sae(const std::filesystem::path& path);

}  // namespace uad
