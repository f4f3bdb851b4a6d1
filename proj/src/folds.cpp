#include "ctarnn/folds.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "ctarnn/errors.hpp"

namespace ctarnn {

FoldPlan make_fold_plan(const Manifest& manifest) {
  std::map<std::string, std::set<std::string>> speakers_by_session;
  for (const auto& r : manifest.records) speakers_by_session[r.session_id].insert(r.speaker_id);
  if (speakers_by_session.size() < 2) {
    throw ConfigError("fold plan: need at least two sessions, found " +
                      std::to_string(speakers_by_session.size()));
  }
  FoldPlan plan;
  for (const auto& [session, speakers] : speakers_by_session) {
    if (speakers.size() < 2) {
      throw ConfigError("fold plan: session " + session + " has fewer than two speakers");
    }
    const std::vector<std::string> ordered(speakers.begin(), speakers.end());
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      Fold f;
      f.index = plan.folds.size();
      f.test_speaker = ordered[i];
      f.val_speaker = ordered[(i + 1) % ordered.size()];
      f.held_out_session = session;
      for (const auto& [other, unused] : speakers_by_session) {
        if (other != session) f.train_sessions.push_back(other);
      }
      plan.folds.push_back(std::move(f));
    }
  }
  check_no_leakage(plan, manifest);
  return plan;
}

void check_no_leakage(const FoldPlan& plan, const Manifest& manifest) {
  for (const Fold& f : plan.folds) {
    if (f.val_speaker == f.test_speaker) {
      throw CheckFailure("fold " + std::to_string(f.index) + ": validation and test speaker coincide");
    }
    const std::set<std::string> train(f.train_sessions.begin(), f.train_sessions.end());
    if (train.count(f.held_out_session)) {
      throw CheckFailure("fold " + std::to_string(f.index) + ": held-out session is in training");
    }
    for (const auto& r : manifest.records) {
      if (!train.count(r.session_id)) continue;
      if (r.speaker_id == f.test_speaker || r.speaker_id == f.val_speaker) {
        throw CheckFailure("speaker leakage in fold " + std::to_string(f.index) + ": speaker " +
                           r.speaker_id + " has training utterance " + r.utterance_id +
                           " in session " + r.session_id);
      }
    }
  }
}

FoldSplit split_fold(const Fold& fold, const Manifest& manifest) {
  const std::set<std::string> train(fold.train_sessions.begin(), fold.train_sessions.end());
  FoldSplit s;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (train.count(r.session_id)) {
      s.train.push_back(i);
    } else if (r.speaker_id == fold.test_speaker) {
      s.test.push_back(i);
    } else if (r.speaker_id == fold.val_speaker) {
      s.val.push_back(i);
    }
  }
  return s;
}

}  // namespace ctarnn
