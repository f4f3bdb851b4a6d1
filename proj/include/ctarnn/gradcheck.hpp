#pragma once

#include <string>

#include "ctarnn/model.hpp"
#include "ctarnn/tensor.hpp"

namespace ctarnn {

// Toy instance for gradient checking. rnn reads a spectrogram stream, lf a
// spectrogram and a longer text stream, every other model the stacked
// embeddings with `channels` blocks. The batch holds two items, the second
// padded by two steps.
struct GradcheckSpec {
  ModelKind kind = ModelKind::cta;
  std::size_t channels = 3;
  std::size_t steps = 5;
  std::size_t input_dim = 4;
  std::size_t hidden = 4;  // per direction
  std::size_t heads = 2;
  std::size_t head_dim = 4;
  std::size_t classes = 3;
  std::uint64_t seed = 1;
  double eps = 1e-5;
};

struct GradcheckResult {
  FiniteDiffReport report;
  std::string worst_param;
  std::size_t parameters = 0;  // scalar count
  double seconds = 0.0;
};

ModelConfig gradcheck_model_config(const GradcheckSpec& spec);
Batch gradcheck_batch(const GradcheckSpec& spec, DType dtype);

// Builds the model in 64-bit mode and compares the cross-entropy gradient of
// every parameter against central differences.
GradcheckResult run_gradcheck(const GradcheckSpec& spec);

}  // namespace ctarnn
