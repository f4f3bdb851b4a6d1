#include "ctarnn/metrics.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace ctarnn {

ConfusionMatrix confusion_matrix(std::span<const int> labels, std::span<const int> predictions,
                                 std::size_t n_classes) {
  if (labels.size() != predictions.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(labels.size()) + " labels but " +
                                std::to_string(predictions.size()) + " predictions");
  }
  ConfusionMatrix cm(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || p < 0 || static_cast<std::size_t>(y) >= n_classes ||
        static_cast<std::size_t>(p) >= n_classes) {
      throw std::invalid_argument("confusion: class index out of range at position " + std::to_string(i));
    }
    ++cm[y][p];
  }
  return cm;
}

std::size_t classes_present(const ConfusionMatrix& confusion) {
  std::size_t n = 0;
  for (const auto& row : confusion) n += std::accumulate(row.begin(), row.end(), std::size_t{0}) > 0;
  return n;
}

double uar(const ConfusionMatrix& confusion) {
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < confusion.size(); ++k) {
    const std::size_t count = std::accumulate(confusion[k].begin(), confusion[k].end(), std::size_t{0});
    if (count == 0) continue;
    total += static_cast<double>(confusion[k][k]) / static_cast<double>(count);
    ++present;
  }
  if (present == 0) throw std::invalid_argument("uar: no labels");
  return total / static_cast<double>(present);
}

double uar(std::span<const int> labels, std::span<const int> predictions, std::size_t n_classes) {
  if (labels.empty()) throw std::invalid_argument("uar: no labels");
  return uar(confusion_matrix(labels, predictions, n_classes));
}

}  // namespace ctarnn
