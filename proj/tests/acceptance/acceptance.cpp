// Acceptance checks. Prints one PASS/FAIL line per selected criterion and
// exits nonzero if any fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "ctarnn/checkpoint.hpp"
#include "ctarnn/cta.hpp"
#include "ctarnn/errors.hpp"
#include "ctarnn/folds.hpp"
#include "ctarnn/gradcheck.hpp"
#include "ctarnn/layers.hpp"
#include "ctarnn/lmfb.hpp"
#include "ctarnn/metrics.hpp"
#include "ctarnn/optim.hpp"
#include "ctarnn/seqf.hpp"
#include "ctarnn/synth.hpp"
#include "ctarnn/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ctarnn;
using ctarnn::testing::max_abs_diff;
using ctarnn::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << " [failed: " << what << "] ";
    pass = pass && ok;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

CtaParams random_cta(std::size_t d, std::size_t heads, std::size_t da, Rng& rng, DType dtype) {
  CtaParams p({d, heads, da, AttentionMode::learned}, rng);
  ParamList list;
  p.collect(list, "cta");
  for (auto& np : list) {
    np.tensor.assign_(random_tensor(np.tensor.shape(), rng, DType::f64));
    np.tensor.convert_(dtype);
  }
  return p;
}

std::vector<double> batch_row(const Tensor& t, std::size_t b) {
  const auto v = t.values();
  const std::size_t w = t.numel() / t.size(0);
  return {v.begin() + b * w, v.begin() + (b + 1) * w};
}

double sum_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// ---------------------------------------------------------------------------

void criterion_1(Outcome& out) {
  const std::pair<ModelKind, const char*> kinds[] = {{ModelKind::cta, "CTA-RNN"}, {ModelKind::wf, "WF"},
                                                     {ModelKind::ef, "EF"},        {ModelKind::lf, "LF"},
                                                     {ModelKind::rnn, "RNN-MHSA"}, {ModelKind::cta_nornn, "CTA w/o RNN"}};
  for (const auto& [kind, label] : kinds) {
    GradcheckSpec spec;
    spec.kind = kind;
    spec.channels = 3;
    spec.steps = 5;
    spec.input_dim = 4;
    spec.hidden = 8;
    spec.heads = 2;
    spec.head_dim = 4;
    spec.classes = 3;
    const GradcheckResult r = run_gradcheck(spec);
    out.detail << label << " " << std::scientific << std::setprecision(1) << r.report.max_rel_error << " ("
               << std::fixed << std::setprecision(2) << r.seconds << " s); ";
    out.require(r.report.max_rel_error < 1e-4, std::string(label) + " rel error");
    out.require(r.seconds < 60.0, std::string(label) + " runtime");
  }
}

void criterion_2(Outcome& out) {
  Rng rng(201);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = dim(rng), heads = dim(rng) % 3 + 1, da = dim(rng), m = dim(rng) + 1;
    MhsaParams mh({d, heads, da}, rng);
    ParamList mlist;
    mh.collect(mlist, "mhsa");
    for (auto& np : mlist) {
      np.tensor.convert_(DType::f64);
      np.tensor.assign_(random_tensor(np.tensor.shape(), rng, DType::f64));
    }
    CtaParams cta = random_cta(d, heads, da, rng, DType::f64);
    // Channel-side query/key take the pooling head's query/key; value maps coincide.
    for (std::size_t j = 0; j < heads; ++j) {
      cta.heads()[j].w_q_c.assign_(mh.heads()[j].w_q);
      cta.heads()[j].w_k_c.assign_(mh.heads()[j].w_k);
      cta.heads()[j].w_v.assign_(mh.heads()[j].w_v);
    }
    const std::size_t batch = 2;
    Tensor h = random_tensor({batch, 1, m, d}, rng, DType::f64, -2, 2);
    std::uniform_int_distribution<std::size_t> len(1, m);
    const std::vector<std::size_t> lengths{len(rng), len(rng)};
    const Mask mask = Mask::from_lengths(lengths, m);
    const Tensor v_cta = cta_attend(h, mask, cta).v;
    const Tensor v_mhsa = mhsa_pool(reshape(h, {batch, m, d}), mask, mh).v;
    worst = std::max(worst, max_abs_diff(v_cta, v_mhsa));
  }
  out.detail << "max |v_cta - v_mhsa| over 100 instances = " << std::scientific << std::setprecision(2) << worst;
  out.require(worst < 1e-6, "N=1 reduction");
}

void criterion_3(Outcome& out) {
  Rng rng(301);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  double sum_err = 0.0, pad_err = 0.0, perm_err = 0.0;
  bool nonneg = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = dim(rng), m = dim(rng), d = dim(rng), heads = dim(rng) % 3 + 1, da = dim(rng);
    CtaParams p = random_cta(d, heads, da, rng, DType::f32);
    const std::size_t batch = 2;
    Tensor h = random_tensor({batch, n, m, d}, rng, DType::f32, -2, 2);
    std::uniform_int_distribution<std::size_t> len(1, m);
    const std::vector<std::size_t> lengths{m, len(rng)};
    const Mask mask = Mask::from_lengths(lengths, m);
    const CtaAttentionOutput o = cta_attend(h, mask, p);
    for (std::size_t j = 0; j < heads; ++j) {
      for (std::size_t b = 0; b < batch; ++b) {
        const auto at = batch_row(o.alpha_t[j], b), ac = batch_row(o.alpha_c[j], b), a = batch_row(o.a[j], b);
        for (const auto* v : {&at, &ac, &a}) {
          nonneg = nonneg && std::all_of(v->begin(), v->end(), [](double x) { return x >= 0.0; });
          sum_err = std::max(sum_err, std::abs(sum_of(*v) - 1.0));
        }
      }
    }
    // Padding: extra masked steps filled with large junk.
    const std::size_t extra = dim(rng);
    Tensor padded = concat({h, random_tensor({batch, n, extra, d}, rng, DType::f32, -50, 50)}, 2);
    const CtaAttentionOutput op = cta_attend(padded, Mask::from_lengths(lengths, m + extra), p);
    pad_err = std::max(pad_err, max_abs_diff(o.v, op.v));
    for (std::size_t j = 0; j < heads; ++j) {
      pad_err = std::max(pad_err, max_abs_diff(o.alpha_t[j], op.alpha_t[j]));
      pad_err = std::max(pad_err, max_abs_diff(o.alpha_c[j], slice(op.alpha_c[j], 1, 0, m)));
    }
    // Joint channel permutation: v unchanged, alpha_t permuted with the channels.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor> channels;
    for (std::size_t c : order) channels.push_back(select(h, 1, c));
    const CtaAttentionOutput oq = cta_attend(stack(channels, 1), mask, p);
    perm_err = std::max(perm_err, max_abs_diff(o.v, oq.v));
    for (std::size_t j = 0; j < heads; ++j) {
      std::vector<Tensor> cols;
      for (std::size_t c : order) cols.push_back(select(o.alpha_t[j], 1, c));
      perm_err = std::max(perm_err, max_abs_diff(stack(cols, 1), oq.alpha_t[j]));
      perm_err = std::max(perm_err, max_abs_diff(o.alpha_c[j], oq.alpha_c[j]));
    }
  }
  out.detail << std::scientific << std::setprecision(2) << "sum err " << sum_err << ", padding " << pad_err
             << ", permutation " << perm_err << (nonneg ? ", all weights >= 0" : ", NEGATIVE weight");
  out.require(nonneg, "non-negative weights");
  out.require(sum_err <= 1e-6, "weights sum to one");
  out.require(pad_err <= 1e-6, "padding invariance");
  out.require(perm_err <= 1e-6, "permutation invariance");
}

void criterion_4(Outcome& out) {
  Rng rng(401);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = dim(rng), m = dim(rng) + 1, d = dim(rng), heads = dim(rng) % 3 + 1, da = dim(rng);
    CtaParams p = random_cta(d, heads, da, rng, DType::f32);
    Tensor h = random_tensor({2, n, m, d}, rng, DType::f32);
    std::uniform_int_distribution<std::size_t> len(1, m);
    const std::vector<std::size_t> lengths{len(rng), len(rng)};
    const CtaAttentionOutput o = cta_attend(h, Mask::from_lengths(lengths, m), p);
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> expected_v;
      for (std::size_t j = 0; j < heads; ++j) {
        const auto& w = p.heads()[j];
        const oracles::CtaHeadWeights ow{w.w_q_t.values(), w.w_k_t.values(), w.w_q_c.values(), w.w_k_c.values(),
                                         w.w_v.values()};
        const auto ref = oracles::cta_head(batch_row(h, b), n, m, lengths[b], d, ow);
        worst = std::max(worst, max_abs_diff(batch_row(o.alpha_t[j], b), ref.alpha_t));
        auto ac = batch_row(o.alpha_c[j], b);
        ac.resize(lengths[b]);
        worst = std::max(worst, max_abs_diff(ac, ref.alpha_c));
        auto a = batch_row(o.a[j], b);
        a.resize(lengths[b] * n);
        worst = std::max(worst, max_abs_diff(a, ref.a));
        expected_v.insert(expected_v.end(), ref.v.begin(), ref.v.end());
      }
      worst = std::max(worst, max_abs_diff(batch_row(o.v, b), expected_v));
    }
  }
  std::size_t uar_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 6);
    const std::size_t n = 1 + rng() % 80;
    std::vector<int> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % c);
      p[i] = static_cast<int>(rng() % c);
    }
    uar_mismatch += uar(y, p, c) != oracles::uar(y, p, c);
  }
  out.detail << "cta vs loops max diff " << std::scientific << std::setprecision(2) << worst
             << "; UAR mismatches " << uar_mismatch << "/1000";
  out.require(worst < 1e-5, "cta oracle");
  out.require(uar_mismatch == 0, "uar oracle");
}

void criterion_5(Outcome& out, const std::filesystem::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec spec;  // 4 classes, N=8, d_e=16, 5 sessions x 2 speakers, 200 per speaker
  spec.signal_scale = 3.0;
  spec.seed = 7;
  generate_synth_corpus(spec, work / "corpus");
  const ManifestLoad load = load_manifest(work / "corpus" / "manifest.jsonl");
  if (!load.ok()) {
    out.require(false, "synthetic manifest");
    return;
  }
  const Manifest& manifest = load.manifest;

  RunConfig cfg;
  cfg.model.kind = ModelKind::cta;
  cfg.model.hidden = 32;
  cfg.model.heads = 2;
  cfg.model.head_dim = 16;
  cfg.train.max_epochs = 5;
  cfg.train.plateau_patience = 2;
  cfg.train.seed = 7;
  cfg.resolve(manifest);
  const Dataset data(manifest, cfg.model, cfg.train.classes);

  CvOptions opts;
  opts.log = [](const std::string& line) {
    if (line.find("test_uar") != std::string::npos) std::fprintf(stderr, "  %s\n", line.c_str());
  };
  std::fprintf(stderr, "  learned attention\n");
  const CvResult learned = run_cv(manifest, cfg, data, opts);
  std::size_t hits = 0, total = 0;
  for (const Evaluation& ev : learned.test) {
    for (std::size_t i = 0; i < ev.indices.size(); ++i) {
      const auto& meta = data[ev.indices[i]].meta;
      hits += ev.attended_channel[i] == meta.at("planted_channel").get<std::size_t>();
      ++total;
    }
  }
  const double hit_rate = static_cast<double>(hits) / static_cast<double>(total);

  RunConfig ablation = cfg;
  ablation.model.attention = AttentionMode::uniform;
  std::fprintf(stderr, "  uniform attention\n");
  const CvResult uniform = run_cv(manifest, ablation, data, opts);
  const double secs = seconds_since(t0);
  const double gap = learned.report.uar_mean - uniform.report.uar_mean;

  out.detail << std::fixed << std::setprecision(4) << "CTA-RNN UAR " << learned.report.uar_mean << " +- "
             << learned.report.uar_std << " (" << cfg.train.max_epochs << " epochs), channel argmax hits "
             << hit_rate << ", uniform ablation UAR " << uniform.report.uar_mean << ", gap " << gap << ", "
             << std::setprecision(0) << secs << " s";
  out.require(learned.report.folds.size() == 10, "10 folds");
  out.require(learned.report.uar_mean >= 0.95, "UAR >= 0.95");
  out.require(hit_rate >= 0.80, "channel argmax >= 80%");
  out.require(gap >= 0.10, "ablation at least 10 UAR points lower");
  out.require(secs < 1800.0, "runtime under 30 min");
}

Manifest layout_manifest(std::size_t sessions, std::size_t speakers) {
  Manifest m;
  for (std::size_t s = 0; s < sessions; ++s) {
    for (std::size_t k = 0; k < speakers; ++k) {
      for (std::size_t u = 0; u < 4; ++u) {
        ManifestRecord r;
        r.session_id = "ses" + std::to_string(s);
        r.speaker_id = "spk" + std::to_string(s * speakers + k);
        r.utterance_id = r.speaker_id + "_" + std::to_string(u);
        r.label = "c" + std::to_string(u % 4);
        m.records.push_back(r);
      }
    }
  }
  return m;
}

void criterion_6(Outcome& out) {
  for (auto [sessions, expected] : {std::pair<std::size_t, std::size_t>{5, 10}, {6, 12}}) {
    const Manifest m = layout_manifest(sessions, 2);
    const FoldPlan plan = make_fold_plan(m);
    out.detail << sessions << "x2 -> " << plan.folds.size() << " folds; ";
    out.require(plan.folds.size() == expected, "fold count");
    bool clean = true;
    for (const Fold& f : plan.folds) {
      const FoldSplit s = split_fold(f, m);
      for (std::size_t i : s.train) {
        const auto& spk = m.records[i].speaker_id;
        clean = clean && spk != f.test_speaker && spk != f.val_speaker;
      }
      clean = clean && f.test_speaker != f.val_speaker && !s.val.empty() && !s.test.empty();
    }
    out.require(clean, "no leakage");
  }
  Manifest leaky = layout_manifest(5, 2);
  leaky.records.back().speaker_id = "spk0";
  bool caught = false;
  try {
    make_fold_plan(leaky);
  } catch (const CheckFailure&) {
    caught = true;
  }
  out.require(caught, "leakage detected");
  out.detail << (caught ? "injected leakage rejected; " : "injected leakage missed; ");

  // Rate used in each epoch when validation loss never improves on the epoch-0 value.
  PlateauScheduler sched(1e-3);
  sched.observe(1.0);
  std::vector<double> used;
  for (int epoch = 1; epoch <= 21; ++epoch) {
    used.push_back(sched.lr());
    sched.observe(1.0);
  }
  bool exact = true;
  for (int e = 1; e <= 21; ++e) {
    const double want = e <= 10 ? 1e-3 : (e <= 20 ? 5e-4 : 2.5e-4);
    exact = exact && used[e - 1] == want;
  }
  out.detail << "lr epoch 10 " << used[9] << ", epoch 11 " << used[10] << ", epoch 21 " << used[20];
  out.require(exact, "halving at the 11th non-improving epoch");
}

void criterion_7(Outcome& out) {
  const auto rows = bench_attention({1, 4, 8, 16}, 200, 64, 8, 64, 7, 1);
  out.detail << std::fixed << std::setprecision(2);
  for (const auto& r : rows) out.detail << "N=" << r.channels << " ratio " << r.ratio() << "; ";
  out.require(rows[1].ratio() < rows[2].ratio() && rows[2].ratio() < rows[3].ratio(), "strictly increasing ratio");
}

void criterion_8(Outcome& out) {
  Rng rng(801);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::uniform_int_distribution<std::uint32_t> bits;
  bool seqf_ok = true;
  ctarnn::testing::TempDir dir("acceptance8");
  for (int trial = 0; trial < 50; ++trial) {
    FloatArray a;
    const std::size_t nd = 2 + trial % 2;
    for (std::size_t k = 0; k < nd; ++k) a.shape.push_back(dim(rng));
    a.data.resize(shape_numel(a.shape));
    // Arbitrary bit patterns, NaN payloads and denormals included.
    for (auto& x : a.data) {
      const std::uint32_t b = bits(rng);
      std::memcpy(&x, &b, sizeof b);
    }
    const FloatArray back = decode_seqf(encode_seqf(a));
    write_seqf(dir / "a.seqf", a);
    const FloatArray disk = read_seqf(dir / "a.seqf");
    for (const FloatArray* r : {&back, &disk}) {
      seqf_ok = seqf_ok && r->shape == a.shape &&
                std::memcmp(r->data.data(), a.data.data(), a.data.size() * sizeof(float)) == 0;
    }
  }
  out.require(seqf_ok, "SEQF round trip");

  bool ckpt_ok = true;
  for (ModelKind kind : {ModelKind::rnn, ModelKind::wf, ModelKind::ef, ModelKind::lf, ModelKind::cta,
                         ModelKind::cta_nornn}) {
    GradcheckSpec spec;
    spec.kind = kind;
    auto model = make_model(gradcheck_model_config(spec));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& p : model->parameters()) {
      for (std::size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.set_value(i, p.tensor.value(i) + u(rng));
    }
    const Batch batch = gradcheck_batch(spec, DType::f32);
    const auto before = model->forward(batch, false, nullptr).logits.values();
    save_checkpoint(dir / model_kind_name(kind), *model, {});
    const auto after = load_checkpoint(dir / model_kind_name(kind)).model->forward(batch, false, nullptr).logits.values();
    ckpt_ok = ckpt_ok && before.size() == after.size() &&
              std::memcmp(before.data(), after.data(), before.size() * sizeof(double)) == 0;
  }
  out.require(ckpt_ok, "checkpoint reload");

  std::uniform_int_distribution<std::size_t> len(400, 48000);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  bool frames_ok = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = len(rng);
    std::vector<float> pcm(n);
    for (auto& x : pcm) x = noise(rng);
    const FloatArray f = extract_lmfb(pcm, 16000);
    frames_ok = frames_ok && f.shape == Shape{(n - 400) / 160 + 1, 80};
  }
  out.require(frames_ok, "LMFB frame count");
  out.detail << "SEQF 50/50 bit-exact: " << (seqf_ok ? "yes" : "no") << "; checkpoint reload bit-exact for 6 models: "
             << (ckpt_ok ? "yes" : "no") << "; LMFB frames match on 50 lengths: " << (frames_ok ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8};
  std::string work;
  app.add_option("--criteria", selected, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--work-dir", work, "Scratch directory for the behavioral run");
  CLI11_PARSE(app, argc, argv);

  std::optional<ctarnn::testing::TempDir> scratch;
  if (work.empty()) scratch.emplace("acceptance");
  const std::filesystem::path work_dir = work.empty() ? scratch->path() : std::filesystem::path(work);

  const std::map<int, std::function<void(Outcome&)>> checks{
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4},
      {5, [&](Outcome& o) { criterion_5(o, work_dir); }},
      {6, criterion_6}, {7, criterion_7}, {8, criterion_8}};
  std::sort(selected.begin(), selected.end());
  selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
  bool all = true;
  for (int c : selected) {
    Outcome o;
    try {
      checks.at(c)(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    std::printf("criterion %d: %s  %s\n", c, o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
