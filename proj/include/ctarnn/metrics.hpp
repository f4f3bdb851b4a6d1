#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ctarnn {

// counts[true][predicted]
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

ConfusionMatrix confusion_matrix(std::span<const int> labels, std::span<const int> predictions,
                                 std::size_t n_classes);

// Unweighted average recall: the mean over classes present in the labels of
// per-class recall. Classes without ground-truth examples are left out.
double uar(const ConfusionMatrix& confusion);
double uar(std::span<const int> labels, std::span<const int> predictions, std::size_t n_classes);

// Number of classes with at least one ground-truth example.
std::size_t classes_present(const ConfusionMatrix& confusion);

}  // namespace ctarnn
