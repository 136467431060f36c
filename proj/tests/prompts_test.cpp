// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>

#include "promptalign/gradcheck.hpp"
#include "promptalign/llm_client.hpp"
#include "promptalign/prompts.hpp"

using namespace promptalign;
namespace fs = std::filesystem;

namespace {

const fs::path kData = PROMPTALIGN_DATA_DIR;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("promptalign_" + name + "_" +
                                        std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> seven_classes() {
  return {"surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral"};
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.vocab_size = 256;
  c.max_text_len = 77;
  c.projection_dim = 8;
  return c;
}

/// Rows are scaled unit basis vectors, so distinct rows are orthogonal.
template <typename T>
BasicTensor<T> orthogonal_rows(std::size_t c, std::size_t d) {
  Buffer<T> v(c * d, T(0));
  for (std::size_t i = 0; i < c; ++i) v[i * d + i] = T(1 + i);
  return BasicTensor<T>({c, d}, std::move(v));
}

double closed_form(std::size_t c, double tau) {
  return -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + double(c - 1)));
}

class FakeClient : public LlmClient {
 public:
  std::string reply = "generated cues";
  bool fail = false;
  int calls = 0;
  std::string complete(const std::string&) override {
    ++calls;
    if (fail) throw std::runtime_error("offline");
    return reply;
  }
};

}  // namespace

TEST(DescriptionsTest, FixtureFilesParse) {
  auto seven = read_descriptions(kData / "descriptions_7.txt");
  ASSERT_EQ(seven.size(), 7u);
  for (const auto& d : seven) {
    EXPECT_FALSE(d.description.empty());
    EXPECT_EQ(d.source, DescriptionSource::fixture_file);
  }
  EXPECT_EQ(read_descriptions(kData / "descriptions_8.txt").size(), 8u);
}

TEST(DescriptionsTest, FetchFromFixturesOnly) {
  auto out = fetch_descriptions(seven_classes(), kData / "descriptions_7.txt");
  ASSERT_EQ(out.size(), 7u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].class_name, seven_classes()[i]);
    EXPECT_EQ(out[i].source, DescriptionSource::fixture_file);
  }
}

TEST(DescriptionsTest, MalformedFixturesReportLine) {
  try {
    parse_descriptions("anger\nlowered brows\n\nfear\n\n", "f.txt");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("f.txt:4:"), std::string::npos) << e.what();
  }
  try {
    parse_descriptions("anger\ncue\n\n# c\nanger\ncue\n", "f.txt");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("f.txt:5:"), std::string::npos) << e.what();
  }
}

TEST(DescriptionsTest, FormatRoundTrips) {
  auto items = read_descriptions(kData / "descriptions_8.txt");
  auto again = parse_descriptions(format_descriptions(items), "mem");
  ASSERT_EQ(again.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(again[i].class_name, items[i].class_name);
    EXPECT_EQ(again[i].description, items[i].description);
  }
}

TEST(DescriptionsTest, MissingClassWithoutRemoteNamesIt) {
  auto dir = temp_dir("missing");
  auto items = read_descriptions(kData / "descriptions_7.txt");
  items.erase(items.begin() + 2);  // disgust
  write_descriptions(dir / "d.txt", items);
  try {
    fetch_descriptions(seven_classes(), dir / "d.txt");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("disgust"), std::string::npos) << e.what();
  }
  FakeClient down;
  down.fail = true;
  EXPECT_THROW(fetch_descriptions(seven_classes(), dir / "d.txt", &down), std::runtime_error);
  fs::remove_all(dir);
}

TEST(DescriptionsTest, RemoteFailureFallsBackToFixtures) {
  FakeClient down;
  down.fail = true;
  auto out = fetch_descriptions(seven_classes(), kData / "descriptions_7.txt", &down, true);
  EXPECT_EQ(down.calls, 7);
  for (const auto& d : out) EXPECT_EQ(d.source, DescriptionSource::fixture_file);
}

TEST(DescriptionsTest, RemoteRepliesAreCachedOverHttp) {
  auto dir = temp_dir("cache");
  auto items = read_descriptions(kData / "descriptions_7.txt");
  items.erase(items.begin() + 2);
  write_descriptions(dir / "d.txt", items);

  httplib::Server server;
  std::atomic<int> hits{0};
  std::string last_body;
  server.Post("/api/generate", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    last_body = req.body;
    res.set_content(R"({"response": "wrinkled nose,\n raised upper lip"})",
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpLlmClient client({"http://127.0.0.1:" + std::to_string(port), "/api/generate",
                        "test-model", "", 5.0, "response"});
  auto first = fetch_descriptions(seven_classes(), dir / "d.txt", &client);
  EXPECT_EQ(hits.load(), 1);
  EXPECT_EQ(first[2].source, DescriptionSource::remote_llm);
  EXPECT_EQ(first[2].description, "wrinkled nose, raised upper lip");
  auto body = nlohmann::json::parse(last_body);
  EXPECT_EQ(body["model"], "test-model");
  EXPECT_NE(body["prompt"].get<std::string>().find("disgust"), std::string::npos);

  auto second = fetch_descriptions(seven_classes(), dir / "d.txt", &client);
  EXPECT_EQ(hits.load(), 1);
  EXPECT_EQ(second[2].source, DescriptionSource::fixture_file);
  EXPECT_EQ(second[2].description, first[2].description);

  server.stop();
  worker.join();
  fs::remove_all(dir);
}

TEST(DescriptionsTest, JsonPathLookup) {
  auto doc = nlohmann::json::parse(R"({"choices": [{"text": "cues"}]})");
  EXPECT_EQ(json_at_path(doc, "choices.0.text"), "cues");
  EXPECT_THROW(json_at_path(doc, "choices.1.text"), std::runtime_error);
  EXPECT_THROW(json_at_path(doc, "response"), std::runtime_error);
}

TEST(HardPromptTest, TemplateTexts) {
  EXPECT_EQ(hard_prompt_text(1, "anger", "x"), "a photo of anger");
  EXPECT_EQ(hard_prompt_text(2, "anger", "x"),
            "a photo of a person making a facial expression of anger");
  auto t3 = hard_prompt_text(3, "anger", "lowered brows");
  EXPECT_NE(t3.find("anger"), std::string::npos);
  EXPECT_NE(t3.find("lowered brows"), std::string::npos);
  EXPECT_THROW(hard_prompt_text(4, "anger", "x"), std::invalid_argument);
}

TEST(HardPromptTest, FeaturesAreFrozenAndDeterministic) {
  auto w = init_frozen_weights<float>(small_config(), 3);
  auto desc = read_descriptions(kData / "descriptions_7.txt");
  auto vocab = build_prompt_vocabulary(desc, w.config.vocab_size);
  auto a = build_hard_prompts(w, vocab, desc, 3);
  auto b = build_hard_prompts(w, vocab, desc, 3);
  ASSERT_EQ(a.features.shape(), (Shape{7, w.config.projection_dim}));
  EXPECT_TRUE(std::equal(a.features.values().begin(), a.features.values().end(),
                         b.features.values().begin()));
  EXPECT_FALSE(a.features.requires_grad());
  for (std::size_t c = 0; c < 7; ++c) {
    double n = 0;
    for (std::size_t j = 0; j < w.config.projection_dim; ++j) {
      const double v = a.features[c * w.config.projection_dim + j];
      n += v * v;
    }
    EXPECT_NEAR(n, 1.0, 1e-6);
    EXPECT_EQ(a.token_ids[c].front(), Vocabulary::kBos);
    EXPECT_EQ(a.token_ids[c].back(), Vocabulary::kEos);
  }
  auto t1 = build_hard_prompts(w, vocab, desc, 1);
  EXPECT_EQ(t1.texts[5], "a photo of anger");
}

TEST(AlignmentLossTest, TokenLevelClosedForm) {
  for (double tau : {0.07, 0.5}) {
    auto hard = orthogonal_rows<double>(7, 16);
    auto soft = hard.detach();
    EXPECT_NEAR(token_level_alignment_loss(soft, hard, tau).item(), closed_form(7, tau), 1e-6);
    EXPECT_NEAR(prompt_level_alignment_loss(soft, hard, tau).item(), closed_form(7, tau), 1e-6);
  }
  auto h = orthogonal_rows<float>(7, 16);
  EXPECT_NEAR(token_level_alignment_loss(h.detach(), h, 0.07f).item(), closed_form(7, 0.07),
              1e-4);
}

TEST(AlignmentLossTest, SingleClassIsZero) {
  Rng rng(1);
  auto a = gaussian_tensor<double>({1, 5}, 1.0, rng);
  auto b = gaussian_tensor<double>({1, 5}, 1.0, rng);
  EXPECT_EQ(token_level_alignment_loss(a, b, 0.07).item(), 0.0);
}

TEST(AlignmentLossTest, ClassCountMismatchRejected) {
  EXPECT_THROW(anchor_contrastive_loss(Tensor({3, 4}), Tensor({2, 4}), 0.07f),
               std::invalid_argument);
  EXPECT_THROW(anchor_contrastive_loss(Tensor({3, 4}), Tensor({3, 5}), 0.07f),
               std::invalid_argument);
}

TEST(AlignmentLossTest, PermutingBothSidesKeepsLoss) {
  Rng rng(5);
  auto soft = gaussian_tensor<double>({6, 8}, 1.0, rng);
  auto hard = gaussian_tensor<double>({6, 8}, 1.0, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  auto permute = [&](const BasicTensor<double>& t) {
    std::vector<BasicTensor<double>> rows;
    for (auto p : perm) rows.push_back(slice(t, 0, p, 1));
    return concat(rows, 0);
  };
  EXPECT_NEAR(prompt_level_alignment_loss(soft, hard, 0.07).item(),
              prompt_level_alignment_loss(permute(soft), permute(hard), 0.07).item(), 1e-12);
}

TEST(AlignmentLossTest, InvariantToRescalingOneEmbedding) {
  Rng rng(8);
  auto soft = gaussian_tensor<float>({7, 16}, 1.0, rng);
  auto hard = gaussian_tensor<float>({7, 16}, 1.0, rng);
  auto base = token_level_alignment_loss(soft, hard, 0.07f).item();
  auto scaled = soft.detach();
  for (std::size_t j = 0; j < 16; ++j) scaled.mutable_values()[3 * 16 + j] *= 5.0f;
  EXPECT_LT(std::abs(token_level_alignment_loss(scaled, hard, 0.07f).item() - base), 1e-6);
  auto hard_scaled = hard.detach();
  for (std::size_t j = 0; j < 16; ++j) hard_scaled.mutable_values()[16 + j] *= 5.0f;
  EXPECT_LT(std::abs(prompt_level_alignment_loss(soft, hard_scaled, 0.07f).item() - base),
            1e-6);
}

TEST(AlignmentLossTest, PerfectMatchDecreasesWithTemperature) {
  auto hard = orthogonal_rows<float>(7, 16);
  float previous = std::numeric_limits<float>::infinity();
  for (float tau : {0.5f, 0.07f, 0.01f}) {
    const float ta = token_level_alignment_loss(hard.detach(), hard, tau).item();
    const float pa = prompt_level_alignment_loss(hard.detach(), hard, tau).item();
    EXPECT_LT(ta, previous);
    EXPECT_EQ(ta, pa);
    previous = ta;
  }
  EXPECT_LT(previous, 1e-6f);
}

TEST(AlignmentLossTest, TextualLossIsSum) {
  EXPECT_FLOAT_EQ(textual_alignment_loss(Tensor::scalar(0.5f), Tensor::scalar(0.3f)).item(),
                  0.8f);
  EXPECT_EQ(textual_alignment_loss(Tensor::scalar(0.f), Tensor::scalar(0.f)).item(), 0.f);
  Rng rng(2);
  auto s = gaussian_tensor<float>({4, 8}, 1.0, rng);
  auto h = gaussian_tensor<float>({4, 8}, 1.0, rng);
  const float ta = token_level_alignment_loss(s, h, 0.1f).item();
  const float pa = prompt_level_alignment_loss(h, s, 0.1f).item();
  EXPECT_FLOAT_EQ(textual_alignment_loss(Tensor::scalar(ta), Tensor::scalar(pa)).item(),
                  ta + pa);
}

TEST(SoftPromptTest, LayoutAndStopGradient) {
  auto w = init_frozen_weights<float>(small_config(), 3);
  auto desc = read_descriptions(kData / "descriptions_7.txt");
  auto vocab = build_prompt_vocabulary(desc, w.config.vocab_size);
  auto hard = build_hard_prompts(w, vocab, desc, 3);
  auto soft = SoftPromptSet<float>::init(w, class_name_tokens(vocab, seven_classes()), 10, 1);
  EXPECT_TRUE(soft.context.requires_grad());
  EXPECT_EQ(soft.context.shape(), (Shape{10, w.config.embed_dim}));
  EXPECT_EQ(soft.sequence(0).dim(0), 13u);
  {
    Tape tape;
    auto l = textual_alignment_loss(
        token_level_alignment_loss(soft.pooled(), hard.pooled, 0.07f),
        prompt_level_alignment_loss(soft.features(w), hard.features, 0.07f));
    backward(l);
  }
  EXPECT_TRUE(soft.context.has_grad());
  EXPECT_FALSE(hard.pooled.has_grad());
  EXPECT_FALSE(hard.features.has_grad());
  for (const auto& e : hard.embeddings) EXPECT_FALSE(e.has_grad());
  for (const auto& e : soft.class_embeddings) EXPECT_FALSE(e.has_grad());
  for (const auto& [name, t] : w.named_parameters()) EXPECT_FALSE(t.has_grad()) << name;
}

TEST(SoftPromptTest, BatchedFeaturesMatchPerClass) {
  auto w = init_frozen_weights<float>(small_config(), 3);
  auto desc = read_descriptions(kData / "descriptions_7.txt");
  auto vocab = build_prompt_vocabulary(desc, w.config.vocab_size);
  auto soft = SoftPromptSet<float>::init(w, class_name_tokens(vocab, seven_classes()), 4, 2);
  auto batched = soft.features(w);
  for (std::size_t c = 0; c < soft.size(); ++c) {
    auto single = text_encode(w, soft.sequence(c));
    for (std::size_t j = 0; j < single.size(); ++j)
      EXPECT_NEAR(batched[c * single.size() + j], single[j], 1e-6);
  }
}

TEST(SoftPromptTest, ContextGradientsMatchFiniteDifferences) {
  auto w = init_frozen_weights<double>(small_config(), 4);
  auto desc = read_descriptions(kData / "descriptions_7.txt");
  auto vocab = build_prompt_vocabulary(desc, w.config.vocab_size);
  auto hard = build_hard_prompts(w, vocab, desc, 3);
  auto base = SoftPromptSet<double>::init(w, class_name_tokens(vocab, seven_classes()), 3, 9);
  auto loss = [&](const BasicTensor<double>& ctx) {
    auto s = base;
    s.context = ctx;
    return add(token_level_alignment_loss(s.pooled(), hard.pooled, 0.07),
               prompt_level_alignment_loss(s.features(w), hard.features, 0.07));
  };
  auto leaf = base.context.detach();
  leaf.set_requires_grad(true);
  {
    Tape tape;
    backward(loss(leaf));
  }
  auto numeric = finite_difference_grad<double>(loss, base.context.detach(), 1e-5);
  auto report = compare_gradients<double>(leaf.grad(), numeric.values());
  EXPECT_TRUE(report.ok) << report.max_relative_error << " at " << report.worst_index;
}
