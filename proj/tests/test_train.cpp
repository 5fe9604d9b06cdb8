#include "gb0/train.hpp"

#include "catch_amalgamated.hpp"

using namespace gb0;
using namespace gb0::train;

namespace {

// Small annotated corpus from the simulator, sized for the micro preset.
std::vector<Episode> micro_corpus(int n, uint64_t seed0, const ModelConfig& cfg) {
  std::vector<Episode> eps;
  sim::CameraRigSpec rig = sim::head_camera_spec(cfg.image_size, cfg.image_size);
  for (int i = 0; i < n; ++i) {
    Episode ep = sim::generate_episode("sort-blocks", seed0 + uint64_t(i),
                                       sim::Variation{}, {sim::build_camera(rig)});
    annotate::annotate_episode(ep);
    eps.push_back(std::move(ep));
  }
  return eps;
}

ModelConfig micro4() {
  ModelConfig cfg = model::preset_config("micro");
  cfg.action_d = 4;  // simulator actions are 4-dimensional
  cfg.dct_keep = 4;
  cfg.check();
  return cfg;
}

}  // namespace

TEST_CASE("loss decomposition: total = ce + flow + lambda * traj") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(2, 100, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 4;

  for (double lambda : {1.0, 0.5, 0.0}) {
    Batch b = sample_batch(corpus, {}, 0.0, 5, cfg, tcfg, stats, m.vocab);
    LossStats s = loss_unified<double>(m, b, lambda, nullptr);
    CHECK(s.total ==
          Catch::Approx(s.cot_ce + s.flow_mse + lambda * s.traj_mse)
              .margin(1e-9));
    CHECK(std::isfinite(s.total));
  }
}

TEST_CASE("zero-initialized expert head: flow equals the raw target power") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(1, 7, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 2;
  Batch b = sample_batch(corpus, {}, 0.0, 11, cfg, tcfg, stats, m.vocab);
  LossStats s = loss_unified<double>(m, b, 1.0, nullptr);

  double want = 0;
  for (const auto& sample : b.samples)
    want += (sample.eps - sample.chunk).squaredNorm() /
            double(cfg.chunk_h * cfg.action_d) / double(b.samples.size());
  CHECK(s.flow_mse == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("masked-out CoT gives exactly zero cross entropy") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(1, 8, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 2;
  Batch b = sample_batch(corpus, {}, 0.0, 13, cfg, tcfg, stats, m.vocab);
  for (auto& s : b.samples)
    std::fill(s.cot_mask.begin(), s.cot_mask.end(), 0.0);
  LossStats s = loss_unified<double>(m, b, 1.0, nullptr);
  CHECK(s.cot_ce == 0.0);
}

TEST_CASE("slot choice statistics follow alpha") {
  Rng rng(99);
  SECTION("alpha 0 draws only real") {
    auto slots = choose_slots(1000, 0.0, 10, 10, rng);
    for (const auto& s : slots) CHECK_FALSE(s.generated);
  }
  SECTION("alpha 1 draws only generated") {
    auto slots = choose_slots(1000, 1.0, 10, 10, rng);
    for (const auto& s : slots) CHECK(s.generated);
  }
  SECTION("alpha 0.75 concentrates around 0.75") {
    auto slots = choose_slots(100000, 0.75, 10, 10, rng);
    double frac = 0;
    for (const auto& s : slots) frac += s.generated ? 1 : 0;
    frac /= double(slots.size());
    CHECK(frac == Catch::Approx(0.75).margin(0.01));
  }
  SECTION("alpha > 0 with no generated corpus is an error") {
    CHECK_THROWS_AS(choose_slots(10, 0.5, 10, 0, rng), EmptyGeneratedCorpus);
    CHECK_NOTHROW(choose_slots(10, 0.0, 10, 0, rng));
  }
  SECTION("empty real corpus is an error") {
    CHECK_THROWS_AS(choose_slots(10, 0.0, 0, 10, rng), EmptyCorpus);
  }
}

TEST_CASE("sample_batch is deterministic given the seed") {
  ModelConfig cfg = micro4();
  auto m = Model<float>::init(cfg, 3);
  auto corpus = micro_corpus(2, 50, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 6;

  Batch a = sample_batch(corpus, {}, 0.0, 42, cfg, tcfg, stats, m.vocab);
  Batch b = sample_batch(corpus, {}, 0.0, 42, cfg, tcfg, stats, m.vocab);
  REQUIRE(a.samples.size() == b.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].suffix_ids == b.samples[i].suffix_ids);
    CHECK(a.samples[i].tau == b.samples[i].tau);
    CHECK(a.samples[i].eps == b.samples[i].eps);
    CHECK(a.samples[i].cam_patches[0] == b.samples[i].cam_patches[0]);
  }
  Batch c = sample_batch(corpus, {}, 0.0, 43, cfg, tcfg, stats, m.vocab);
  bool any_diff = false;
  for (size_t i = 0; i < a.samples.size(); ++i)
    if (a.samples[i].eps != c.samples[i].eps) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("per-sample isolation: batch loss is the mean of singleton losses") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(2, 60, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  Batch b = sample_batch(corpus, {}, 0.0, 17, cfg, tcfg, stats, m.vocab);

  LossStats whole = loss_unified<double>(m, b, 1.0, nullptr);
  double sum = 0;
  for (const auto& s : b.samples) {
    Batch one;
    one.samples = {s};
    sum += loss_unified<double>(m, one, 1.0, nullptr).total;
  }
  CHECK(whole.total == Catch::Approx(sum / 4.0).margin(1e-9));

  // ablating one sample's annotations does not move the others
  Batch mutated = b;
  std::fill(mutated.samples[2].cot_mask.begin(),
            mutated.samples[2].cot_mask.end(), 0.0);
  mutated.samples[2].traj_mask.setZero();
  double sum_others_before = 0, sum_others_after = 0;
  for (size_t i = 0; i < 4; ++i) {
    if (i == 2) continue;
    Batch one;
    one.samples = {b.samples[i]};
    sum_others_before += loss_unified<double>(m, one, 1.0, nullptr).total;
    one.samples = {mutated.samples[i]};
    sum_others_after += loss_unified<double>(m, one, 1.0, nullptr).total;
  }
  CHECK(sum_others_before == sum_others_after);
}

TEST_CASE("gradient reduction is independent of the worker count") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(2, 70, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 8;
  Batch b = sample_batch(corpus, {}, 0.0, 23, cfg, tcfg, stats, m.vocab);

  setenv("GB0_THREADS", "1", 1);
  nn::GradBuffer<double> g1(m.params);
  loss_unified(m, b, 1.0, &g1);
  setenv("GB0_THREADS", "2", 1);
  nn::GradBuffer<double> g2(m.params);
  loss_unified(m, b, 1.0, &g2);
  unsetenv("GB0_THREADS");

  for (size_t i = 0; i < m.params.count(); ++i) {
    REQUIRE(g1.grads[i].size() == g2.grads[i].size());
    if (g1.grads[i].size() == 0) continue;
    CHECK((g1.grads[i] - g2.grads[i]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("flow-only step leaves backbone parameters bit-identical") {
  ModelConfig cfg = micro4();
  auto m = Model<double>::init(cfg, 3);
  auto corpus = micro_corpus(1, 80, cfg);
  annotate::ActionStats stats = annotate::fit_action_stats(corpus);
  TrainConfig tcfg;
  tcfg.batch_size = 2;
  Batch b = sample_batch(corpus, {}, 0.0, 29, cfg, tcfg, stats, m.vocab);
  // strip every CoT and trajectory signal so flow matching is the only term
  for (auto& s : b.samples) {
    std::fill(s.cot_mask.begin(), s.cot_mask.end(), 0.0);
    s.traj_mask.setZero();
  }

  std::vector<nn::MatT<double>> backbone_before, traj_before;
  for (size_t i = 0; i < m.params.count(); ++i) {
    if (m.params.entries[i].group == nn::kBackbone)
      backbone_before.push_back(m.params[int(i)]);
    if (m.params.entries[i].group == nn::kTrajHead)
      traj_before.push_back(m.params[int(i)]);
  }

  nn::GradBuffer<double> grads(m.params);
  loss_unified(m, b, 1.0, &grads);
  Adam<double> opt(m.params);
  opt.step(m.params, grads, 1e-3, tcfg);

  size_t bi = 0, ti = 0;
  bool expert_moved = false;
  for (size_t i = 0; i < m.params.count(); ++i) {
    if (m.params.entries[i].group == nn::kBackbone) {
      CHECK((m.params[int(i)] - backbone_before[bi]).cwiseAbs().maxCoeff() == 0.0);
      ++bi;
    } else if (m.params.entries[i].group == nn::kTrajHead) {
      CHECK((m.params[int(i)] - traj_before[ti]).cwiseAbs().maxCoeff() == 0.0);
      ++ti;
    } else if (grads.grads[i].size() > 0 &&
               grads.grads[i].cwiseAbs().maxCoeff() > 0) {
      expert_moved = true;
    }
  }
  CHECK(expert_moved);
}

TEST_CASE("lambda = 0 leaves the trajectory head at initialization") {
  ModelConfig cfg = micro4();
  auto m = Model<float>::init(cfg, 5);
  auto corpus = micro_corpus(1, 90, cfg);
  std::vector<nn::MatT<float>> before;
  for (size_t i = 0; i < m.params.count(); ++i)
    if (m.params.entries[i].group == nn::kTrajHead)
      before.push_back(m.params[int(i)]);

  TrainConfig tcfg;
  tcfg.batch_size = 2;
  tcfg.total_steps = 5;
  tcfg.lambda_traj = 0.0;
  tcfg.warmup_steps = 1;
  tcfg.log_every = 100;
  train_run(m, corpus, {}, tcfg);

  size_t k = 0;
  for (size_t i = 0; i < m.params.count(); ++i)
    if (m.params.entries[i].group == nn::kTrajHead) {
      CHECK((m.params[int(i)] - before[k]).cwiseAbs().maxCoeff() == 0.0f);
      ++k;
    }
}

TEST_CASE("training is deterministic: identical seeds, identical logs") {
  ModelConfig cfg = micro4();
  auto corpus = micro_corpus(2, 95, cfg);
  TrainConfig tcfg;
  tcfg.batch_size = 3;
  tcfg.total_steps = 6;
  tcfg.log_every = 2;
  tcfg.warmup_steps = 2;
  tcfg.seed = 7;

  auto m1 = Model<float>::init(cfg, 11);
  auto r1 = train_run(m1, corpus, {}, tcfg);
  auto m2 = Model<float>::init(cfg, 11);
  auto r2 = train_run(m2, corpus, {}, tcfg);
  REQUIRE(r1.metric_lines.size() == r2.metric_lines.size());
  for (size_t i = 0; i < r1.metric_lines.size(); ++i)
    CHECK(r1.metric_lines[i] == r2.metric_lines[i]);
  for (size_t i = 0; i < m1.params.count(); ++i)
    CHECK((m1.params[int(i)] - m2.params[int(i)]).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("a short run reduces the loss on a tiny corpus") {
  ModelConfig cfg = micro4();
  auto m = Model<float>::init(cfg, 21);
  auto corpus = micro_corpus(2, 33, cfg);
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.total_steps = 60;
  tcfg.warmup_steps = 5;
  tcfg.lr = 3e-3;
  tcfg.log_every = 1;
  tcfg.seed = 3;

  std::vector<double> totals;
  train_run<float>(m, corpus, {}, tcfg, "",
                   [&](int, const LossStats& s) { totals.push_back(s.total); });
  REQUIRE(totals.size() >= 10);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) head += totals[size_t(i)];
  for (int i = 0; i < 5; ++i) tail += totals[totals.size() - 1 - size_t(i)];
  INFO("head " << head / 5 << " tail " << tail / 5);
  CHECK(tail < head);
}

TEST_CASE("learning-rate schedule: warmup then cosine to the floor") {
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  cfg.cosine_floor = 0.1;
  CHECK(lr_at(cfg, 0) == Catch::Approx(0.1));
  CHECK(lr_at(cfg, 9) == Catch::Approx(1.0));
  CHECK(lr_at(cfg, 10) == Catch::Approx(1.0));
  CHECK(lr_at(cfg, 109) == Catch::Approx(0.1).epsilon(0.01));
  for (int s = 10; s < 109; ++s) CHECK(lr_at(cfg, s) >= lr_at(cfg, s + 1) - 1e-12);
}
