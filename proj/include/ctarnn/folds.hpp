#pragma once

#include <string>
#include <vector>

#include "ctarnn/manifest.hpp"

namespace ctarnn {

// Leave-one-speaker-out fold: the held-out session is excluded from
// training; one of its speakers is the test speaker, its partner validates.
struct Fold {
  std::size_t index = 0;
  std::string test_speaker;
  std::string val_speaker;
  std::string held_out_session;
  std::vector<std::string> train_sessions;
};

struct FoldPlan {
  std::vector<Fold> folds;
};

// One fold per speaker, ordered by session then speaker id. Within a
// session the validation speaker is the next speaker in sorted order
// (cyclically). Throws ConfigError with fewer than two sessions or a
// session with fewer than two speakers. Checks the plan for leakage.
FoldPlan make_fold_plan(const Manifest& manifest);

// Throws CheckFailure if any training utterance belongs to a fold's test or
// validation speaker, or validation and test speakers coincide.
void check_no_leakage(const FoldPlan& plan, const Manifest& manifest);

// Record indices of a fold's partitions.
struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};
FoldSplit split_fold(const Fold& fold, const Manifest& manifest);

}  // namespace ctarnn
