#include "ctarnn/checkpoint.hpp"
#include "ctarnn/folds.hpp"
#include "ctarnn/metrics.hpp"
#include "ctarnn/optim.hpp"
#include "ctarnn/trainer.hpp"

#include <doctest.h>

#include <numeric>
#include <set>

#include "ctarnn/errors.hpp"
#include "ctarnn/gradcheck.hpp"
#include "ctarnn/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ctarnn;
using ctarnn::testing::TempDir;

namespace {

NamedParam scalar_param(const std::string& name, double v) {
  Tensor t = Tensor::from_doubles({1}, {v});
  t.set_requires_grad(true);
  return {name, t};
}

// Gradient of sum(g * p) is g everywhere.
void linear_grad(const Tensor& p, double g) { backward(sum(scale(p, g))); }

Manifest layout_manifest(std::size_t sessions, std::size_t speakers, std::size_t per_speaker) {
  Manifest m;
  for (std::size_t s = 0; s < sessions; ++s) {
    for (std::size_t k = 0; k < speakers; ++k) {
      for (std::size_t u = 0; u < per_speaker; ++u) {
        ManifestRecord r;
        r.session_id = "s" + std::to_string(s);
        r.speaker_id = r.session_id + "_spk" + std::to_string(k);
        r.utterance_id = r.speaker_id + "_" + std::to_string(u);
        r.label = "c" + std::to_string(u % 2);
        m.records.push_back(r);
      }
    }
  }
  return m;
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.n_classes = 3;
  s.n_channels = 3;
  s.d_e = 4;
  s.length_mean = 10;
  s.length_std = 2;
  s.salience_len = 3;
  s.signal_scale = 3;
  s.seed = 11;
  s.n_sessions = 2;
  s.speakers_per_session = 2;
  s.utterances_per_speaker = 24;
  return s;
}

RunConfig tiny_run(ModelKind kind = ModelKind::cta) {
  RunConfig cfg;
  cfg.model.kind = kind;
  cfg.model.hidden = 6;
  cfg.model.heads = 1;
  cfg.model.head_dim = 4;
  cfg.model.dropout = 0.1;
  cfg.train.batch_size = 8;
  cfg.train.max_epochs = 4;
  cfg.train.plateau_patience = 2;
  cfg.train.lr0 = 1e-2;
  cfg.train.seed = 3;
  return cfg;
}

Manifest tiny_corpus(const TempDir& dir, const SynthSpec& spec = tiny_spec()) {
  generate_synth_corpus(spec, dir.path());
  ManifestLoad load = load_manifest(dir / "manifest.jsonl");
  REQUIRE(load.ok());
  return load.manifest;
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("zero gradients leave parameters unchanged") {
    NamedParam p = scalar_param("w", 0.7);
    Adam adam({p});
    for (int i = 0; i < 5; ++i) {
      adam.zero_grad();
      linear_grad(p.tensor, 0.0);
      adam.step(1e-3);
    }
    CHECK(p.tensor.item() == 0.7);
  }

  TEST_CASE("constant gradient moves by lr times its sign") {
    for (double g : {2.5, -0.03}) {
      NamedParam p = scalar_param("w", 0.0);
      Adam adam({p});
      double prev = 0.0;
      for (int i = 0; i < 200; ++i) {
        adam.zero_grad();
        linear_grad(p.tensor, g);
        adam.step(1e-3);
        const double step = p.tensor.item() - prev;
        prev = p.tensor.item();
        CHECK(step == doctest::Approx(-1e-3 * (g > 0 ? 1 : -1)).epsilon(1e-4));
      }
    }
  }

  TEST_CASE("one-parameter quadratic converges within 2000 steps") {
    NamedParam p = scalar_param("w", 1.0);
    Adam adam({p});
    int steps = 0;
    double loss = 1.0;
    while (loss >= 1e-6 && steps < 2000) {
      adam.zero_grad();
      Tensor l = mul(p.tensor, p.tensor);
      loss = l.value(0);
      if (loss < 1e-6) break;
      backward(sum(l));
      adam.step(1e-2);
      ++steps;
    }
    CHECK(loss < 1e-6);
    CHECK(steps <= 2000);
  }

  TEST_CASE("matches a reference update on random gradients") {
    Rng rng(4);
    std::normal_distribution<double> normal;
    NamedParam p = scalar_param("w", 0.3);
    Adam adam({p}, 0.8, 0.95, 1e-6);
    double w = 0.3, m = 0.0, v = 0.0;
    for (int t = 1; t <= 50; ++t) {
      const double g = normal(rng);
      adam.zero_grad();
      linear_grad(p.tensor, g);
      adam.step(0.01);
      m = 0.8 * m + 0.2 * g;
      v = 0.95 * v + 0.05 * g * g;
      w -= 0.01 * (m / (1 - std::pow(0.8, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-6);
      CHECK(p.tensor.item() == doctest::Approx(w).epsilon(1e-12));
    }
  }

  TEST_CASE("NaN gradient aborts with the parameter name and updates nothing") {
    NamedParam a = scalar_param("enc.att.h0.w_q", 1.0);
    NamedParam b = scalar_param("head.bias", 2.0);
    Adam adam({b, a});
    linear_grad(b.tensor, 1.0);
    linear_grad(a.tensor, std::nan(""));
    try {
      adam.step(0.1);
      FAIL("expected CheckFailure");
    } catch (const CheckFailure& e) {
      CHECK(std::string(e.what()).find("enc.att.h0.w_q") != std::string::npos);
    }
    CHECK(a.tensor.item() == 1.0);
    CHECK(b.tensor.item() == 2.0);
  }

  TEST_CASE("parameters without a gradient are skipped") {
    NamedParam a = scalar_param("a", 1.0);
    NamedParam b = scalar_param("b", 2.0);
    Adam adam({a, b});
    linear_grad(a.tensor, 1.0);
    adam.step(0.1);
    CHECK(a.tensor.item() < 1.0);
    CHECK(b.tensor.item() == 2.0);
  }
}

TEST_SUITE("plateau scheduler") {
  TEST_CASE("strictly decreasing losses keep the initial rate") {
    PlateauScheduler s(1e-3);
    for (int e = 0; e < 60; ++e) CHECK(s.observe(10.0 - e * 0.1) == 1e-3);
  }

  TEST_CASE("ten flat epochs halve the rate for epoch eleven") {
    PlateauScheduler s(1e-3);
    s.observe(1.0);  // epoch 0 baseline
    for (int e = 1; e <= 9; ++e) CHECK(s.observe(1.0) == 1e-3);
    CHECK(s.observe(1.0) == 5e-4);
    CHECK(s.reductions() == 1);
  }

  TEST_CASE("twenty flat epochs halve twice") {
    PlateauScheduler s(1e-3);
    s.observe(1.0);
    double lr = 0;
    for (int e = 1; e <= 20; ++e) lr = s.observe(1.0);
    CHECK(lr == 2.5e-4);
    CHECK(s.reductions() == 2);
  }

  TEST_CASE("improvement resets the count") {
    PlateauScheduler s(1e-3);
    s.observe(1.0);
    for (int e = 0; e < 9; ++e) s.observe(1.5);
    s.observe(0.9);
    for (int e = 0; e < 9; ++e) CHECK(s.observe(0.95) == 1e-3);
    CHECK(s.observe(0.95) == 5e-4);
  }

  TEST_CASE("equal loss is not an improvement") {
    PlateauScheduler s(1e-3, 2);
    s.observe(1.0);
    s.observe(1.0);
    CHECK(s.observe(1.0) == 5e-4);
  }

  TEST_CASE("random histories: rate is lr0 times a power of the factor, halvings bounded") {
    Rng rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
      PlateauScheduler s(1e-3, 3);
      double best = INFINITY;
      std::size_t stale = 0, expected = 0;
      for (int e = 0; e < 40; ++e) {
        const double loss = u(rng);
        s.observe(loss);
        if (loss < best) {
          best = loss;
          stale = 0;
        } else if (++stale == 3) {
          ++expected;
          stale = 0;
        }
        REQUIRE(s.reductions() == expected);
        REQUIRE(s.lr() == doctest::Approx(1e-3 * std::pow(0.5, expected)).epsilon(1e-15));
      }
    }
  }

  TEST_CASE("rejects bad settings") {
    CHECK_THROWS_AS(PlateauScheduler(0.0), ConfigError);
    CHECK_THROWS_AS(PlateauScheduler(1e-3, 0), ConfigError);
    CHECK_THROWS_AS(PlateauScheduler(1e-3, 10, 1.0), ConfigError);
  }
}

TEST_SUITE("uar") {
  TEST_CASE("perfect predictions score one") {
    const std::vector<int> y{0, 1, 2, 3, 1, 0};
    CHECK(uar(y, y, 4) == 1.0);
  }

  TEST_CASE("hand-computed example") {
    const std::vector<int> y{0, 0, 1, 1, 2, 3}, p{0, 1, 1, 1, 2, 2};
    CHECK(uar(y, p, 4) == doctest::Approx(0.625).epsilon(1e-15));
  }

  TEST_CASE("single class, all correct, scores one") {
    const std::vector<int> y{2, 2, 2};
    CHECK(uar(y, y, 4) == 1.0);
  }

  TEST_CASE("matches the brute-force oracle exactly") {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
      const int c = 2 + static_cast<int>(rng() % 5);
      const std::size_t n = 1 + rng() % 60;
      std::vector<int> y(n), p(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng() % c);
        p[i] = static_cast<int>(rng() % c);
      }
      REQUIRE(uar(y, p, c) == oracles::uar(y, p, c));
    }
  }

  TEST_CASE("invariant under a joint relabeling") {
    Rng rng(22);
    for (int trial = 0; trial < 300; ++trial) {
      const int c = 4;
      std::vector<int> perm(c);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<int> y(40), p(40), yp(40), pp(40);
      for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = static_cast<int>(rng() % c);
        p[i] = static_cast<int>(rng() % c);
        yp[i] = perm[y[i]];
        pp[i] = perm[p[i]];
      }
      REQUIRE(uar(y, p, c) == doctest::Approx(uar(yp, pp, c)).epsilon(1e-15));
    }
  }

  TEST_CASE("constant predictor on a balanced set scores exactly one over c") {
    for (int c = 2; c <= 7; ++c) {
      std::vector<int> y, p;
      for (int k = 0; k < c; ++k) {
        for (int i = 0; i < 5; ++i) {
          y.push_back(k);
          p.push_back(c - 1);
        }
      }
      CHECK(uar(y, p, c) == 1.0 / c);
    }
  }

  TEST_CASE("confusion rows sum to the per-class counts") {
    Rng rng(23);
    std::vector<int> y(100), p(100);
    std::vector<std::size_t> count(5, 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = static_cast<int>(rng() % 5);
      p[i] = static_cast<int>(rng() % 5);
      ++count[y[i]];
    }
    const auto cm = confusion_matrix(y, p, 5);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(std::accumulate(cm[k].begin(), cm[k].end(), std::size_t{0}) == count[k]);
    }
  }

  TEST_CASE("errors") {
    const std::vector<int> empty, one{0}, two{0, 1}, bad{7};
    CHECK_THROWS_AS(uar(empty, empty, 3), std::invalid_argument);
    CHECK_THROWS_AS(uar(one, two, 3), std::invalid_argument);
    CHECK_THROWS_AS(uar(bad, one, 3), std::invalid_argument);
  }
}

TEST_SUITE("fold plan") {
  TEST_CASE("five sessions of two speakers give ten folds") {
    const Manifest m = layout_manifest(5, 2, 3);
    const FoldPlan plan = make_fold_plan(m);
    CHECK(plan.folds.size() == 10);
  }

  TEST_CASE("six sessions of two speakers give twelve folds") {
    CHECK(make_fold_plan(layout_manifest(6, 2, 3)).folds.size() == 12);
  }

  TEST_CASE("every fold: distinct held-out speakers from the held-out session, disjoint partitions") {
    for (std::size_t sessions : {2, 3, 5}) {
      for (std::size_t speakers : {2, 3}) {
        const Manifest m = layout_manifest(sessions, speakers, 4);
        const FoldPlan plan = make_fold_plan(m);
        REQUIRE(plan.folds.size() == sessions * speakers);
        std::set<std::string> tested;
        for (const Fold& f : plan.folds) {
          CHECK(f.val_speaker != f.test_speaker);
          CHECK(f.test_speaker.rfind(f.held_out_session + "_", 0) == 0);
          CHECK(f.val_speaker.rfind(f.held_out_session + "_", 0) == 0);
          CHECK(f.train_sessions.size() == sessions - 1);
          tested.insert(f.test_speaker);
          const FoldSplit s = split_fold(f, m);
          std::set<std::string> train_spk;
          for (std::size_t i : s.train) train_spk.insert(m.records[i].speaker_id);
          CHECK_FALSE(train_spk.count(f.val_speaker));
          CHECK_FALSE(train_spk.count(f.test_speaker));
          for (std::size_t i : s.val) CHECK(m.records[i].speaker_id == f.val_speaker);
          for (std::size_t i : s.test) CHECK(m.records[i].speaker_id == f.test_speaker);
          CHECK(s.val.size() == 4);
          CHECK(s.test.size() == 4);
        }
        CHECK(tested.size() == sessions * speakers);
      }
    }
  }

  TEST_CASE("a speaker recorded in two sessions is caught as leakage") {
    Manifest m = layout_manifest(5, 2, 3);
    m.records.back().speaker_id = m.records.front().speaker_id;
    CHECK_THROWS_AS(make_fold_plan(m), CheckFailure);
  }

  TEST_CASE("too few sessions or speakers is an error") {
    CHECK_THROWS_AS(make_fold_plan(layout_manifest(1, 4, 3)), ConfigError);
    CHECK_THROWS_AS(make_fold_plan(layout_manifest(3, 1, 3)), ConfigError);
  }

  TEST_CASE("check_no_leakage rejects a hand-made leaking plan") {
    const Manifest m = layout_manifest(3, 2, 2);
    FoldPlan plan = make_fold_plan(m);
    plan.folds[0].train_sessions.push_back(plan.folds[0].held_out_session);
    CHECK_THROWS_AS(check_no_leakage(plan, m), CheckFailure);
  }
}

TEST_SUITE("config") {
  TEST_CASE("run config round-trips through key = value text") {
    const auto kv = KeyValueConfig::parse(
        "model = wf\nhidden = 16\nheads = 2\nhead_dim = 8\nbatch_size = 16\nmax_epochs = 20\n"
        "lr0 = 0.002\nplateau_patience = 5\nlr_factor = 0.25\nseed = 99\nclasses = [ang, hap, neu, sad]\n"
        "selection = uar\n");
    const RunConfig cfg = RunConfig::from_config(kv);
    CHECK(cfg.model.kind == ModelKind::wf);
    CHECK(cfg.model.n_classes == 4);
    CHECK(cfg.model.seed == 99);
    CHECK(cfg.train.batch_size == 16);
    CHECK(cfg.train.lr_factor == 0.25);
    CHECK(cfg.train.selection == Selection::uar);
    const RunConfig back = RunConfig::from_config(KeyValueConfig::parse(cfg.to_config().dump()));
    CHECK(back.train.to_json() == cfg.train.to_json());
    CHECK(back.model.to_json() == cfg.model.to_json());
    CHECK(TrainConfig::from_json(cfg.train.to_json()).to_json() == cfg.train.to_json());
  }

  TEST_CASE("defaults follow the training recipe") {
    const TrainConfig t;
    CHECK(t.batch_size == 32);
    CHECK(t.max_epochs == 50);
    CHECK(t.lr0 == 1e-3);
    CHECK(t.plateau_patience == 10);
    CHECK(t.lr_factor == 0.5);
    CHECK(t.adam_beta1 == 0.9);
    CHECK(t.adam_beta2 == 0.999);
    CHECK(t.adam_eps == 1e-8);
    CHECK(t.selection == Selection::loss);
  }

  TEST_CASE("rejects unknown keys and inconsistent values") {
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("learning_rate = 0.1\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("max_epochs = 10\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("batch_size = 0\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("lr0 = -1\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("selection = f1\n")), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("classes = [a, b]\nn_classes = 3\n")),
                    ConfigError);
    CHECK_THROWS_AS(RunConfig::from_config(KeyValueConfig::parse("classes = [a, a]\n")), ConfigError);
  }

  TEST_CASE("resolve takes classes and dims from the data") {
    TempDir dir("resolve");
    const Manifest m = tiny_corpus(dir);
    RunConfig cfg = tiny_run();
    cfg.resolve(m);
    CHECK(cfg.train.classes == std::vector<std::string>{"class0", "class1", "class2"});
    CHECK(cfg.model.n_classes == 3);
    CHECK(cfg.model.n_blocks == 3);
    CHECK(cfg.model.embedding_dim == 4);
    RunConfig wrong = tiny_run();
    wrong.model.embedding_dim = 5;
    CHECK_THROWS_AS(wrong.resolve(m), ConfigError);
    RunConfig missing = tiny_run();
    missing.train.classes = {"class0", "class1"};
    CHECK_THROWS_AS(missing.resolve(m), ConfigError);
  }
}

TEST_SUITE("dataset") {
  TEST_CASE("batches pad to the longest member and mask the rest") {
    TempDir dir("batch");
    const Manifest m = tiny_corpus(dir);
    RunConfig cfg = tiny_run();
    cfg.model.blocks = {1, 3};
    cfg.resolve(m);
    const Dataset data(m, cfg.model, cfg.train.classes);
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    const Batch b = make_batch(data, idx);
    const StreamBatch& s = b.stream(StreamKind::embeddings);
    std::size_t longest = 0;
    for (std::size_t i : idx) longest = std::max(longest, data[i].length());
    REQUIRE(s.x.shape() == Shape{4, 2, longest, 4});
    const FloatArray full = read_seqf(m.resolve(*m.records[2].embeddings));
    const std::size_t len = data[2].length();
    for (std::size_t t = 0; t < longest; ++t) {
      CHECK(s.mask[2 * longest + t] == (t < len));
      for (std::size_t k = 0; k < 4; ++k) {
        const double got = s.x.value(((2 * 2 + 1) * longest + t) * 4 + k);
        CHECK(got == (t < len ? full.data[(2 * len + t) * 4 + k] : 0.0f));
      }
    }
    CHECK(b.labels[1] == data[1].label);
  }

  TEST_CASE("length batches cover every index once and group by length") {
    TempDir dir("lenbatch");
    const Manifest m = tiny_corpus(dir);
    RunConfig cfg = tiny_run();
    cfg.resolve(m);
    const Dataset data(m, cfg.model, cfg.train.classes);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(1);
    for (Rng* r : {static_cast<Rng*>(nullptr), &rng}) {
      const auto batches = length_batches(data, idx, 8, r);
      std::multiset<std::size_t> seen;
      std::size_t spread = 0;
      for (const auto& b : batches) {
        CHECK(b.size() <= 8);
        std::size_t lo = SIZE_MAX, hi = 0;
        for (std::size_t i : b) {
          seen.insert(i);
          lo = std::min(lo, data[i].length());
          hi = std::max(hi, data[i].length());
        }
        spread = std::max(spread, hi - lo);
      }
      CHECK(seen == std::multiset<std::size_t>(idx.begin(), idx.end()));
      CHECK(spread <= 4);
    }
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("reload reproduces inference outputs bit-exactly for every model") {
    for (ModelKind kind : {ModelKind::rnn, ModelKind::wf, ModelKind::ef, ModelKind::lf, ModelKind::cta,
                           ModelKind::cta_nornn}) {
      CAPTURE(model_kind_name(kind));
      GradcheckSpec spec;
      spec.kind = kind;
      const ModelConfig cfg = gradcheck_model_config(spec);
      auto model = make_model(cfg);
      // Move away from the initial values so a silent re-init would show.
      Rng rng(5);
      std::uniform_real_distribution<double> u(-0.5, 0.5);
      for (auto& p : model->parameters()) {
        for (std::size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.set_value(i, p.tensor.value(i) + u(rng));
      }
      const Batch batch = gradcheck_batch(spec, DType::f32);
      const auto before = model->probabilities(batch).values();
      TempDir dir("ckpt");
      CheckpointInfo info;
      info.train.classes = {"a", "b", "c"};
      info.selected_epoch = 7;
      save_checkpoint(dir.path(), *model, info);
      const LoadedCheckpoint loaded = load_checkpoint(dir.path());
      const auto after = loaded.model->probabilities(batch).values();
      REQUIRE(before.size() == after.size());
      for (std::size_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);
      CHECK(loaded.info.selected_epoch == 7);
      CHECK(loaded.info.train.classes == info.train.classes);
      CHECK(loaded.model->config().to_json() == cfg.to_json());
    }
  }

  TEST_CASE("damaged checkpoints are rejected") {
    GradcheckSpec spec;
    auto model = make_model(gradcheck_model_config(spec));
    TempDir dir("ckpt_bad");
    save_checkpoint(dir.path(), *model, {});
    SUBCASE("missing tensor file") {
      std::filesystem::remove(dir / "head.bias.seqf");
      CHECK_THROWS_AS(load_checkpoint(dir.path()), IoError);
    }
    SUBCASE("wrong format tag") {
      auto text = ctarnn::testing::read_file(dir / "params.json");
      text.replace(text.find(kCheckpointFormat), std::string(kCheckpointFormat).size(), "other");
      ctarnn::testing::write_file(dir / "params.json", text);
      CHECK_THROWS_AS(load_checkpoint(dir.path()), FormatError);
    }
    SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(dir / "nope"), IoError); }
  }

  TEST_CASE("find_checkpoints lists fold directories in order") {
    GradcheckSpec spec;
    auto model = make_model(gradcheck_model_config(spec));
    TempDir dir("ckpt_find");
    for (const char* name : {"fold_01", "fold_00", "fold_02"}) save_checkpoint(dir / name, *model, {});
    std::filesystem::create_directories(dir / "other");
    const auto found = find_checkpoints(dir.path());
    REQUIRE(found.size() == 3);
    CHECK(found[0].filename() == "fold_00");
    CHECK(found[2].filename() == "fold_02");
    CHECK(find_checkpoints(dir / "fold_01").size() == 1);
  }
}

TEST_SUITE("cross-validation") {
  TEST_CASE("same seed gives an identical report, independent of thread count") {
    TempDir dir("cv_det");
    const Manifest m = tiny_corpus(dir);
    const RunConfig cfg = tiny_run();
    const CvResult a = run_cv(m, cfg);
    CvOptions two;
    two.threads = 2;
    const CvResult b = run_cv(m, cfg, two);
    CHECK(a.report.to_json().dump() == b.report.to_json().dump());
    CHECK(a.report.folds.size() == 4);
    for (const auto& f : a.report.folds) {
      CHECK(f.history.size() == 4);
      CHECK(f.selected_epoch >= 1);
      std::size_t total = 0;
      for (const auto& row : f.confusion) total += std::accumulate(row.begin(), row.end(), std::size_t{0});
      CHECK(total == f.n_test);
    }
    RunConfig other = cfg;
    other.train.seed = 4;
    CHECK(run_cv(m, other).report.to_json().dump() != a.report.to_json().dump());
  }

  TEST_CASE("the selected epoch is the one with the lowest validation loss") {
    TempDir dir("cv_sel");
    const Manifest m = tiny_corpus(dir);
    const CvResult r = run_cv(m, tiny_run());
    for (const auto& f : r.report.folds) {
      std::size_t best = 0;
      for (std::size_t e = 0; e < f.history.size(); ++e) {
        if (f.history[e].val_loss < f.history[best].val_loss) best = e;
      }
      CHECK(f.selected_epoch == f.history[best].epoch);
      CHECK(f.selected_value == f.history[best].val_loss);
    }
  }

  TEST_CASE("every model kind trains through run_cv") {
    TempDir dir("cv_kinds");
    const Manifest m = tiny_corpus(dir);
    for (ModelKind kind : {ModelKind::wf, ModelKind::ef, ModelKind::cta_nornn}) {
      RunConfig cfg = tiny_run(kind);
      cfg.train.max_epochs = 2;
      cfg.train.plateau_patience = 1;
      const CvResult r = run_cv(m, cfg);
      CHECK(r.report.uars.size() == 4);
      for (const auto& model : r.models) CHECK_NOTHROW(model->check_invariants());
    }
    RunConfig rnn = tiny_run(ModelKind::rnn);
    rnn.model.blocks = {2};
    rnn.train.max_epochs = 2;
    rnn.train.plateau_patience = 1;
    CHECK(run_cv(m, rnn).report.uars.size() == 4);
  }

  TEST_CASE("checkpoints evaluate on their own corpus at least as well as held out") {
    TempDir dir("cv_cross");
    const Manifest m = tiny_corpus(dir);
    CvOptions opts;
    opts.checkpoint_root = dir / "folds";
    const CvResult r = run_cv(m, tiny_run(), opts);
    const auto dirs = find_checkpoints(dir / "folds");
    REQUIRE(dirs.size() == 4);
    const EvalReport cross = cross_eval(dirs, m);
    CHECK(cross.kind == "cross_eval");
    CHECK(cross.uars.size() == 4);
    CHECK(cross.uar_mean == doctest::Approx(mean_of(cross.uars)));
    CHECK(cross.to_json()["models"].size() == 4);
    CHECK(cross.uar_mean >= r.report.uar_mean);
    for (std::size_t k = 0; k < 4; ++k) {
      const LoadedCheckpoint ck = load_checkpoint(dirs[k]);
      const Evaluation again = evaluate(*ck.model, Dataset(m, ck.model->config(), ck.info.train.classes),
                                        r.test[k].indices, 8);
      CHECK(again.predictions == r.test[k].predictions);
    }
  }

  TEST_CASE("cross evaluation rejects mismatched labels and dims") {
    TempDir dir("cv_mismatch");
    const Manifest m = tiny_corpus(dir);
    RunConfig cfg = tiny_run();
    cfg.resolve(m);
    auto model = make_model(cfg.model);
    CheckpointInfo info;
    info.train = cfg.train;
    save_checkpoint(dir / "ck", *model, info);

    TempDir other("cv_mismatch_y");
    SynthSpec spec = tiny_spec();
    spec.class_names = {"x", "y", "z"};
    const Manifest relabeled = tiny_corpus(other, spec);
    CHECK_THROWS_AS(cross_eval({dir / "ck"}, relabeled), ConfigError);

    TempDir third("cv_mismatch_d");
    spec = tiny_spec();
    spec.d_e = 5;
    const Manifest wider = tiny_corpus(third, spec);
    CHECK_THROWS_AS(cross_eval({dir / "ck"}, wider), ConfigError);
  }

  TEST_CASE("a corpus with one session cannot be cross-validated") {
    TempDir dir("cv_one");
    SynthSpec spec = tiny_spec();
    spec.n_sessions = 1;
    const Manifest m = tiny_corpus(dir, spec);
    CHECK_THROWS_AS(run_cv(m, tiny_run()), ConfigError);
  }
}

TEST_SUITE("attention readout") {
  TEST_CASE("attended channel is the argmax of the head-averaged channel weights") {
    CtaAttentionOutput att;
    att.alpha_t.push_back(Tensor::from_doubles({2, 3}, {0.2, 0.5, 0.3, 0.6, 0.3, 0.1}));
    att.alpha_t.push_back(Tensor::from_doubles({2, 3}, {0.1, 0.1, 0.8, 0.0, 0.5, 0.5}));
    // head means: [0.15, 0.3, 0.55], [0.3, 0.4, 0.3]
    CHECK(attended_channels(att) == std::vector<std::size_t>{2, 1});
  }
}
