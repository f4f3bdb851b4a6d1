#include "ctarnn/gradcheck.hpp"

#include <chrono>

namespace ctarnn {

namespace {

StreamBatch random_stream(const Shape& shape, const std::vector<std::size_t>& lengths,
                          std::size_t max_len, DType dtype, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return {Tensor::from_values(shape, v, dtype), Mask::from_lengths(lengths, max_len)};
}

}  // namespace

ModelConfig gradcheck_model_config(const GradcheckSpec& spec) {
  ModelConfig cfg;
  cfg.kind = spec.kind;
  cfg.n_classes = spec.classes;
  cfg.hidden = spec.hidden;
  cfg.rnn_layers = 2;
  cfg.dropout = 0.0;
  cfg.heads = spec.heads;
  cfg.head_dim = spec.head_dim;
  cfg.seed = spec.seed;
  switch (spec.kind) {
    case ModelKind::rnn:
      cfg.streams = {StreamKind::spectrogram};
      cfg.spectrogram_dim = spec.input_dim;
      break;
    case ModelKind::lf:
      cfg.streams = {StreamKind::spectrogram, StreamKind::text};
      cfg.spectrogram_dim = spec.input_dim;
      cfg.text_dim = spec.input_dim + 1;
      break;
    default:
      cfg.streams = {StreamKind::embeddings};
      cfg.n_blocks = spec.channels;
      cfg.embedding_dim = spec.input_dim;
      break;
  }
  return cfg;
}

Batch gradcheck_batch(const GradcheckSpec& spec, DType dtype) {
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  const ModelConfig cfg = gradcheck_model_config(spec);
  Batch batch;
  batch.ids = {"toy0", "toy1"};
  for (std::size_t b = 0; b < 2; ++b) batch.labels.push_back(static_cast<int>(b % spec.classes));
  const std::size_t m = spec.steps;
  const std::vector<std::size_t> lengths{m, m > 2 ? m - 2 : 1};
  for (StreamKind s : cfg.streams) {
    if (s == StreamKind::embeddings) {
      batch.streams[s] = random_stream({2, spec.channels, m, spec.input_dim}, lengths, m, dtype, rng);
    } else if (s == StreamKind::text) {
      const std::vector<std::size_t> text_lengths{m + 2, m};
      batch.streams[s] = random_stream({2, m + 2, cfg.text_dim}, text_lengths, m + 2, dtype, rng);
    } else {
      batch.streams[s] = random_stream({2, m, spec.input_dim}, lengths, m, dtype, rng);
    }
  }
  return batch;
}

GradcheckResult run_gradcheck(const GradcheckSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  auto model = make_model(gradcheck_model_config(spec));
  ParamList params = model->parameters();
  // Re-draw every parameter (including zero-initialised biases) so no
  // gradient path is trivially flat.
  Rng rng(spec.seed + 17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& p : params) {
    Tensor t = p.tensor;
    t.convert_(DType::f64);
    for (std::size_t i = 0; i < t.numel(); ++i) t.set_value(i, u(rng));
  }
  const Batch batch = gradcheck_batch(spec, DType::f64);
  auto loss = [&] { return cross_entropy(model->forward(batch, false, nullptr).logits, batch.labels); };
  GradcheckResult out;
  out.report = finite_diff_report(loss, tensors_of(params), spec.eps);
  out.worst_param = params.empty() ? "" : params[out.report.worst_param].name;
  out.parameters = count_elements(params);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace ctarnn
