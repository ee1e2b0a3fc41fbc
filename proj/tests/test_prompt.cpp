#include <gtest/gtest.h>

#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "segedit/prompt.hpp"
#include "segedit/scenes.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

TEST(Decompose, WhiteHorse) {
  const auto p = decompose_caption("a photo of a white horse on the grass");
  EXPECT_EQ(p.text(p.domain), "a photo");
  ASSERT_EQ(p.adjectives.size(), 1u);
  EXPECT_EQ(p.text(p.adjectives[0]), "white");
  EXPECT_EQ(p.subject_text(), "horse");
  EXPECT_EQ(p.text(p.action), "on");
  EXPECT_EQ(p.text(p.background), "grass");
}

TEST(Decompose, MinimalCaption) {
  const auto p = decompose_caption("a cat");
  EXPECT_EQ(p.subject_text(), "cat");
  EXPECT_TRUE(p.domain.empty());
  EXPECT_TRUE(p.adjectives.empty());
  EXPECT_TRUE(p.action.empty());
  EXPECT_TRUE(p.background.empty());
}

TEST(Decompose, NoSubjectThrows) {
  EXPECT_THROW(decompose_caption("a photo of something"), std::invalid_argument);
  EXPECT_THROW(decompose_caption(""), std::invalid_argument);
}

std::vector<std::string> caption_corpus() {
  std::vector<std::string> out;
  const World w = World::standard();
  RandomSceneOptions o;
  o.random_color_probability = 0.5;
  for (std::uint64_t s = 0; s < 40; ++s) out.push_back(caption_for(random_scene_spec(w, s, o), w));
  for (const char* c : {"a cat", "two sheep lying in the grass", "an airplane on the ground",
                        "a white and red train", "a photo of a brown dog running on the beach",
                        "a close-up photo of a small red car parked near the house", "a bird",
                        "a painting of a horse in the field", "a large boat on the water", "a black cat, sitting on a chair"})
    out.push_back(c);
  return out;
}

bool disjoint_ordered(const PromptParts& p) {
  std::vector<Span> spans{p.domain};
  for (const auto& a : p.adjectives) spans.push_back(a);
  spans.push_back(p.subject);
  spans.push_back(p.action);
  spans.push_back(p.background);
  int last = 0;
  for (const auto& s : spans) {
    if (s.empty()) continue;
    if (s.begin < last || s.end > static_cast<int>(p.raw.size())) return false;
    last = s.end;
  }
  return true;
}

TEST(Decompose, CorpusReassemblesAndSpansAreOrdered) {
  const auto corpus = caption_corpus();
  ASSERT_EQ(corpus.size(), 50u);
  for (const auto& c : corpus) {
    const auto p = decompose_caption(c);
    EXPECT_EQ(p.reassemble(), c);
    EXPECT_TRUE(disjoint_ordered(p)) << c;
    EXPECT_FALSE(p.subject.empty()) << c;
  }
}

TEST(Edit, ColorInTwoColorCaption) {
  const auto r = edit_attribute(decompose_caption("a white and red train"), AttributeKind::Color, "blue");
  EXPECT_EQ(r.target, "a white and blue train");
  ASSERT_EQ(r.edit_indices.size(), 1u);
  EXPECT_EQ(r.target_words[r.edit_indices[0]], "blue");
}

TEST(Edit, MaterialAddsFormNoun) {
  const auto r = edit_attribute(decompose_caption("an airplane on the ground"), AttributeKind::Material, "wooden");
  EXPECT_EQ(r.target, "a wooden airplane model on the ground");
}

TEST(Edit, WeatherAppendsAndPreservesOrder) {
  const std::string src = "two sheep lying in the grass";
  const auto r = edit_attribute(decompose_caption(src), AttributeKind::Weather, "heavy rain");
  EXPECT_NE(r.target.find("downpour"), std::string::npos);
  const auto sw = split_words(src);
  std::size_t j = 0;
  for (const auto& w : r.target_words)
    if (j < sw.size() && w == sw[j]) ++j;
  EXPECT_EQ(j, sw.size());
}

TEST(Edit, UnknownValueListsVocabulary) {
  try {
    edit_attribute(decompose_caption("a cat"), AttributeKind::Color, "teal");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("purple"), std::string::npos);
  }
}

TEST(Edit, RevertAndRedecomposeOverCorpus) {
  const AttributeVocabulary vocab;
  int made = 0;
  for (const auto& c : caption_corpus()) {
    const auto parts = decompose_caption(c);
    for (auto kind : {AttributeKind::Color, AttributeKind::Material, AttributeKind::Style, AttributeKind::Weather})
      for (const auto& v : vocab.values(kind)) {
        EditRequest r;
        try {
          r = edit_attribute(parts, kind, v, vocab);
        } catch (const std::invalid_argument&) {
          continue;  // value already present
        }
        ++made;
        EXPECT_EQ(r.revert(), c);
        EXPECT_FALSE(r.edit_indices.empty());
        for (int i : r.edit_indices) {
          EXPECT_GE(i, r.target_span.begin);
          EXPECT_LT(i, r.target_span.end);
        }
        EXPECT_EQ(decompose_caption(r.target).subject_text(), parts.subject_text()) << r.target;
        EXPECT_EQ(r.value, v);
      }
  }
  EXPECT_GT(made, 800);
}

TEST(Edit, DiffRules) {
  EXPECT_THROW(make_edit_request("a red cat", "a red dog", AttributeKind::Color, ""), std::invalid_argument);
  EXPECT_THROW(make_edit_request("a red cat", "a red cat", AttributeKind::Color, ""), std::invalid_argument);
  EXPECT_THROW(make_edit_request("a red cat", "a cat", AttributeKind::Color, ""), std::invalid_argument);
  const auto r = make_edit_request("a red cat", "a blue cat", AttributeKind::Color, "blue");
  EXPECT_EQ(r.edit_indices, std::vector<int>{1});
}

TEST(Instructions, FourDistinctTemplates) {
  EXPECT_NE(render_instruction(AttributeKind::Color).find("change the color of the object"), std::string::npos);
  EXPECT_NE(render_instruction(AttributeKind::Weather).find("only changing the weather conditions"), std::string::npos);
  std::set<std::string> all;
  for (auto k : {AttributeKind::Color, AttributeKind::Material, AttributeKind::Style, AttributeKind::Weather}) {
    EXPECT_FALSE(render_instruction(k).empty());
    all.insert(render_instruction(k));
  }
  EXPECT_EQ(all.size(), 4u);
}

struct StubClient : LanguageClient {
  std::vector<std::string> out;
  std::string seen_instruction;
  std::vector<std::string> complete(const std::string& instruction, const std::string&) override {
    seen_instruction = instruction;
    return out;
  }
};

TEST(LlmEdit, PassthroughMatchesRuleBased) {
  const auto rule = edit_attribute(decompose_caption("a photo of a red cat on the sofa"), AttributeKind::Color, "green");
  StubClient c;
  c.out = {rule.target};
  const auto res = llm_edit(c, rule.source, AttributeKind::Color);
  ASSERT_EQ(res.accepted.size(), 1u);
  EXPECT_EQ(res.accepted[0].target, rule.target);
  EXPECT_EQ(res.accepted[0].edit_indices, rule.edit_indices);
  EXPECT_EQ(res.accepted[0].value, "green");
  EXPECT_EQ(c.seen_instruction, render_instruction(AttributeKind::Color));
}

TEST(LlmEdit, FiltersInvalidPreservingOrder) {
  StubClient c;
  c.out = {"a blue cat on the sofa", "a red dog on the sofa", "a green cat on the sofa", "a yellow cat on the sofa"};
  auto res = llm_edit(c, "a red cat on the sofa", AttributeKind::Color);
  ASSERT_EQ(res.accepted.size(), 3u);
  EXPECT_EQ(res.accepted[0].value, "blue");
  EXPECT_EQ(res.accepted[1].value, "green");
  EXPECT_EQ(res.accepted[2].value, "yellow");
  ASSERT_EQ(res.rejected.size(), 1u);
  EXPECT_EQ(res.rejected[0].first, "a red dog on the sofa");
  c.out = {"a red dog"};
  EXPECT_TRUE(llm_edit(c, "a red cat", AttributeKind::Color).accepted.empty());
}

TEST(HttpClient, TalksToLocalServer) {
  httplib::Server svr;
  nlohmann::json last;
  svr.Post("/v1/edit", [&](const httplib::Request& req, httplib::Response& res) {
    last = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"candidates", {"a blue cat", "a red dog"}}}.dump(), "application/json");
  });
  svr.Post("/v1/broken", [](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();

  HttpLanguageClient::Options o;
  o.base_url = "http://127.0.0.1:" + std::to_string(port);
  HttpLanguageClient client(o);
  const auto res = llm_edit(client, "a red cat", AttributeKind::Color);
  EXPECT_EQ(last["caption"], "a red cat");
  EXPECT_EQ(last["template"], render_instruction(AttributeKind::Color));
  ASSERT_EQ(res.accepted.size(), 1u);
  EXPECT_EQ(res.accepted[0].target, "a blue cat");

  o.path = "/v1/broken";
  HttpLanguageClient broken(o);
  EXPECT_THROW(broken.complete("x", "y"), BackendError);
  svr.stop();
  th.join();
}

TEST(HttpClient, UnreachableThrowsBackendError) {
  HttpLanguageClient::Options o;
  o.base_url = "http://127.0.0.1:9";
  o.timeout = std::chrono::milliseconds(300);
  o.retries = 1;
  HttpLanguageClient client(o);
  EXPECT_THROW(llm_edit(client, "a red cat", AttributeKind::Color), BackendError);
}

TEST(Tokenizer, EncodesCaseInsensitivelyWithUnknowns) {
  const auto t = Tokenizer::builtin();
  const auto ids = t.encode("A Red cat zzzqqq");
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids[0], Tokenizer::kBos);
  EXPECT_EQ(ids[2], t.id("red"));
  EXPECT_NE(ids[2], Tokenizer::kUnk);
  EXPECT_EQ(ids[4], Tokenizer::kUnk);
  EXPECT_EQ(split_words("a cat, sitting."), (std::vector<std::string>{"a", "cat", ",", "sitting", "."}));
  EXPECT_EQ(join_words(split_words("a cat, sitting.")), "a cat, sitting.");
}

}  // namespace
}  // namespace segedit
