#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <set>

#include "lrel/error.hpp"
#include "lrel/eval.hpp"
#include "support/reference_model.hpp"

using namespace lrel;

namespace {

std::string fixtures_dir() {
  const char* env = std::getenv("LREL_FIXTURES");
  REQUIRE(env != nullptr);
  return env;
}

struct Fixture {
  SyntheticData data;
  Parameters params;
};

Fixture eval_fixture(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_stems = 20;
  spec.arbitrary_targets = 4;
  spec.held_out_fraction = 0.0;
  spec.n_docs = 4;
  spec.lines_per_doc = 2;
  Fixture f{generate_synthetic(spec, seed), {}};
  ModelConfig cfg = lrel_test::small_config(16, 2, 2, f.data.vocab.size(), 64, seed);
  f.params = build_model(cfg);
  return f;
}

}  // namespace

TEST_CASE("classify_suffix reproduces the tagged reference rows") {
  CHECK(classify_suffix("successes", "success", "successes") == SuffixClass::Correct);
  CHECK(classify_suffix("conscious", "conscious", "consciousness") == SuffixClass::Stemmed);
  CHECK(classify_suffix("being", "mad", "madness") == SuffixClass::Incorrect);

  // Shared-stem rule details: length >= 3 and prefix of both sides.
  CHECK(classify_suffix("se", "serious", "seriousness") == SuffixClass::Incorrect);
  CHECK(classify_suffix("investing", "invest", "investment") == SuffixClass::Incorrect);
  CHECK(classify_suffix("invest", "invest", "investment") == SuffixClass::Stemmed);
  CHECK_THROWS_AS(classify_suffix("", "a", "b"), InputError);
}

TEST_CASE("unique_start_tokens: word level counts distinct objects") {
  RelationCategory cat;
  cat.id = "t";
  cat.pairs = {{"a", {"xs"}}, {"b", {"ys"}}, {"c", {"xs"}}};
  CHECK(unique_start_tokens(cat, word_level_first_token()) == 2);
}

TEST_CASE("prefix tokenizer mimics sub-word starts over BATS fixtures") {
  const std::vector<RelationCategory> cats = parse_bats_dir(fixtures_dir() + "/bats");
  const FirstTokenFn prefix = make_prefix_tokenizer({"un", "re", "over"});
  const FirstTokenFn word = word_level_first_token();

  int plural_count = 0;
  std::vector<int> prefix_counts;
  for (const RelationCategory& c : cats) {
    if (c.group == RelationGroup::Inflectional) {
      plural_count = unique_start_tokens(c, prefix);
    } else {
      prefix_counts.push_back(unique_start_tokens(c, prefix));
    }
    // Word level: essentially one start token per distinct object.
    CHECK(unique_start_tokens(c, word) >= 45);
  }
  REQUIRE(prefix_counts.size() == 3);
  for (const int c : prefix_counts) CHECK(c < plural_count);
}

TEST_CASE("synthetic arbitrary relation start tokens obey the pigeonhole bound") {
  const Fixture f = eval_fixture(70);
  CHECK(unique_start_tokens(f.data.categories[1], word_level_first_token()) <= 4);
}

TEST_CASE("faithfulness is 1 for an operator that reproduces the exact map") {
  const Fixture f = eval_fixture(71);
  const RelationCategory& cat = f.data.categories[0];
  auto [train, test_all] = split_pairs(cat, 8, 3);
  std::vector<RelationPair> test(test_all.begin(), test_all.begin() + 6);

  // source layer L, subject at the last position: the map is the identity,
  // so s = o and the identity Linear operator reproduces it exactly.
  const int d = f.params.config.d_model;
  RelationalOperator identity;
  identity.kind = OperatorKind::Linear;
  identity.W = Mat(d, d);
  for (int i = 0; i < d; ++i) identity.W.at(i, i) = 1.0;
  identity.source_layer = f.params.config.n_layers;
  identity.relation_id = cat.id;

  const FaithfulnessResult r = faithfulness(f.params, f.data.vocab, cat, identity, test, train);
  CHECK(r.n_test == 6);
  CHECK(r.matched == 6);
  CHECK(r.faithfulness == 1.0);
}

TEST_CASE("zero-vector operator matches only when the model predicts token 0") {
  const Fixture f = eval_fixture(72);
  const RelationCategory& cat = f.data.categories[0];
  auto [train, test_all] = split_pairs(cat, 8, 4);
  std::vector<RelationPair> test(test_all.begin(), test_all.begin() + 5);

  const int d = f.params.config.d_model;
  ModelConfig cfg = f.params.config;
  cfg.final_layer_norm = false;  // zero state stays zero through decode
  Parameters params = build_model(cfg);

  RelationalOperator zero_op;
  zero_op.kind = OperatorKind::Linear;
  zero_op.W = Mat(d, d);  // maps everything to the zero vector
  zero_op.source_layer = 1;
  zero_op.relation_id = cat.id;

  const FaithfulnessResult r = faithfulness(params, f.data.vocab, cat, zero_op, test, train);
  // decode(0) with zero offset ties all logits; argmax is token 0. So matches
  // count exactly the prompts whose model prediction is token 0.
  int expect = 0;
  for (const RelationPair& p : test) {
    const Prompt prompt = build_prompt(cat, f.data.vocab, p.subject, train);
    if (predict_next(params, prompt.tokens) == 0) ++expect;
  }
  CHECK(r.matched == expect);
}

TEST_CASE("faithfulness enforces the evaluation protocol") {
  const Fixture f = eval_fixture(73);
  const RelationCategory& cat = f.data.categories[0];
  auto [train, test_all] = split_pairs(cat, 8, 5);
  std::vector<RelationPair> test(test_all.begin(), test_all.begin() + 4);

  RelationalOperator op;
  op.kind = OperatorKind::Bias;
  op.b.assign(f.params.config.d_model, 0.0);
  op.source_layer = 1;
  op.relation_id = cat.id;
  op.n_samples = 1;
  op.sample_ids = {test[0].subject};  // overlap
  CHECK_THROWS_AS(faithfulness(f.params, f.data.vocab, cat, op, test, train), ProtocolError);

  op.sample_ids = {train[0].subject};
  CHECK_THROWS_AS(
      faithfulness(f.params, f.data.vocab, cat, op, std::vector<RelationPair>{}, train),
      EvalError);
}

TEST_CASE("match decisions are invariant to positive rescaling of the state") {
  Fixture f = eval_fixture(74);
  ModelConfig cfg = f.params.config;
  cfg.decoder_bias = false;
  cfg.final_layer_norm = false;
  const Parameters params = build_model(cfg);

  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Vec state(cfg.d_model);
    for (double& x : state) x = rng.gaussian();
    const int base = decode_argmax(params, state);
    for (const double scale : {0.25, 2.0, 7.0}) {
      Vec scaled(cfg.d_model);
      for (int i = 0; i < cfg.d_model; ++i) scaled[i] = scale * state[i];
      CHECK(decode_argmax(params, scaled) == base);
    }
  }
}

TEST_CASE("sweep: determinism, single layer, and single run") {
  const Fixture f = eval_fixture(75);
  const RelationCategory& cat = f.data.categories[0];

  SweepOptions opt;
  opt.kinds = {OperatorKind::Affine, OperatorKind::Linear};
  opt.layer_lo = 1;
  opt.layer_hi = 1;
  opt.n_runs = 1;
  opt.n_train = 8;
  opt.beta = 1.0;
  opt.seed = 42;

  // An untrained model keeps nearly nothing; widen the net by accepting the
  // throw when filtering empties the pool.
  try {
    const SweepResult a = sweep(f.params, f.data.vocab, cat, opt);
    const SweepResult b = sweep(f.params, f.data.vocab, cat, opt);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      CHECK(a.rows[i].faithfulness == b.rows[i].faithfulness);
      CHECK(a.rows[i].run_seed == b.rows[i].run_seed);
    }
    const EvalReport& rep = a.reports.at(OperatorKind::Affine);
    CHECK(rep.source_layer == "best");
    // Single layer in range: best equals that layer's score; single run:
    // the mean equals the single max.
    CHECK(rep.faithfulness == rep.per_layer.at(1));
    CHECK(results_csv(a.rows) == results_csv(b.rows));
  } catch (const EvalError&) {
    // acceptable for an untrained model: filter_known emptied the test pool
  }
}

TEST_CASE("results CSV round trips through the parser") {
  std::vector<SweepRow> rows;
  rows.push_back({"syn-plural", "Synthetic", "affine", 2, 12345, 0.875, 0.75, 40});
  rows.push_back({"I01 [noun - plural_reg]", "Inflectional", "linear", 0, 7, 0.5, 0.25, 8});
  const std::string csv = results_csv(rows);
  const std::vector<SweepRow> back = parse_results_csv(csv);
  REQUIRE(back.size() == 2);
  CHECK(back[0].relation_id == "syn-plural");
  CHECK(back[0].faithfulness == 0.875);
  CHECK(back[1].layer == 0);
  CHECK(back[1].run_seed == 7);
  CHECK(back[1].n_test == 8);
  CHECK(results_csv(back) == csv);
}

TEST_CASE("report_table folds rows by group without recomputation") {
  std::vector<SweepRow> rows;
  // Two layers per run; the fold must pick the best layer per run.
  rows.push_back({"r1", "Synthetic", "affine", 0, 1, 0.2, 0.1, 10});
  rows.push_back({"r1", "Synthetic", "affine", 1, 1, 0.8, 0.1, 10});
  rows.push_back({"r1", "Synthetic", "affine", 0, 2, 0.4, 0.1, 10});
  rows.push_back({"r1", "Synthetic", "affine", 1, 2, 0.6, 0.1, 10});
  const std::string table = report_table(rows);
  CHECK(table.find("=== Synthetic ===") != std::string::npos);
  CHECK(table.find("0.7000") != std::string::npos);  // mean of 0.8 and 0.6
}
