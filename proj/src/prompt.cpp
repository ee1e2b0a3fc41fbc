#include "segedit/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace segedit {

namespace {

const std::set<std::string> kDeterminers = {"a", "an", "the", "two", "three", "some", "this", "that", "one", "several"};
const std::set<std::string> kConnectors = {"and", ","};
const std::set<std::string> kFormNouns = {"model", "sculpture"};
const std::set<std::string> kStopwords = {"a",     "an",   "the",  "of",   "on",  "in",    "at",     "under",
                                          "during", "and", "with", "to",   "is",  "are",   "two",    "three",
                                          "some",  "this", "that", "one",  "by",  "from",  "<bos>",  "<unk>",
                                          "over",  "near", "it",   "its",  "for", "several"};

const std::set<std::string> kSubjectNouns = {
    "ball",   "box",      "kite",     "leaf",   "person",  "man",     "woman",     "child",  "boy",
    "girl",   "cat",      "dog",      "horse",  "sheep",   "cow",     "bird",      "elephant", "bear",
    "zebra",  "giraffe",  "train",    "airplane", "aeroplane", "bus", "car",       "bicycle", "motorcycle",
    "motorbike", "boat",  "truck",    "bottle", "chair",   "couch",   "sofa",      "table",  "plant",
    "tv",     "monitor",  "bench",    "umbrella", "cake",  "pizza",   "clock",     "vase",   "laptop"};
const std::set<std::string> kAnimals = {"cat",  "dog",   "horse", "sheep",  "cow",    "bird", "elephant",
                                        "bear", "zebra", "giraffe", "person", "man", "woman", "child",
                                        "boy",  "girl"};
const std::set<std::string> kBackgroundNouns = {"sky",  "sand",  "grass", "ground", "sidewalk", "road",
                                                "street", "field", "water", "beach", "snow",   "room"};

bool is_punct(const std::string& w) { return w.size() == 1 && std::ispunct(static_cast<unsigned char>(w[0])); }

bool starts_with_vowel(const std::string& w) {
  return !w.empty() && std::string("aeiou").find(static_cast<char>(std::tolower(w[0]))) != std::string::npos;
}

// Re-agree an indefinite article at words[i] with the word that follows it.
void fix_article(std::vector<std::string>& words, int i) {
  if (i < 0 || i + 1 >= static_cast<int>(words.size())) return;
  const std::string lw = lowercase(words[i]);
  if (lw != "a" && lw != "an") return;
  const bool cap = std::isupper(static_cast<unsigned char>(words[i][0]));
  std::string art = starts_with_vowel(words[i + 1]) ? "an" : "a";
  if (cap) art[0] = 'A';
  words[i] = art;
}

std::vector<std::string> split_value(const std::string& v) { return split_words(v); }

}  // namespace

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u) && c != '\'' && c != '-' && c != '<' && c != '>') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty() && !(is_punct(w) && w != "(")) out.push_back(' ');
    out += w;
  }
  return out;
}

bool is_subject_noun(const std::string& word) { return kSubjectNouns.count(lowercase(word)) > 0; }
bool is_animal(const std::string& word) { return kAnimals.count(lowercase(word)) > 0; }
bool is_stopword(const std::string& word) {
  const std::string lw = lowercase(word);
  return kStopwords.count(lw) > 0 || is_punct(lw);
}

// ---- Tokenizer ------------------------------------------------------------------

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  if (vocab_.size() < 2 || vocab_[0] != "<bos>" || vocab_[1] != "<unk>")
    throw std::invalid_argument("Tokenizer: vocabulary must start with <bos>, <unk>");
  for (int i = 0; i < static_cast<int>(vocab_.size()); ++i) sorted_.emplace_back(lowercase(vocab_[i]), i);
  std::sort(sorted_.begin(), sorted_.end());
  for (std::size_t i = 1; i < sorted_.size(); ++i)
    if (sorted_[i].first == sorted_[i - 1].first)
      throw std::invalid_argument("Tokenizer: duplicate vocabulary entry '" + sorted_[i].first + "'");
}

Tokenizer Tokenizer::builtin() {
  std::vector<std::string> v = {"<bos>", "<unk>", ",", ".", "photo", "picture", "image", "of", "on", "in", "at",
                                "under", "during", "with", "and", "is", "are", "lying", "laying", "sitting",
                                "standing", "outside", "model", "sculpture"};
  for (const auto& w : kDeterminers) v.push_back(w);
  const AttributeVocabulary attrs;
  std::set<std::string> extra;
  for (const auto* list : {&attrs.color, &attrs.material, &attrs.style, &attrs.weather})
    for (const auto& value : *list)
      for (const auto& w : split_words(value)) extra.insert(w);
  for (const auto& value : attrs.weather)
    for (const auto& w : split_words(weather_phrase(value))) extra.insert(w);
  for (const auto& w : kSubjectNouns) extra.insert(w);
  for (const auto& w : kBackgroundNouns) extra.insert(w);
  for (const char* w : {"wood", "metal", "leather", "big", "small", "large", "red"}) extra.insert(w);
  for (const auto& w : extra)
    if (std::find(v.begin(), v.end(), w) == v.end()) v.push_back(w);
  return Tokenizer(std::move(v));
}

Tokenizer Tokenizer::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path);
  std::vector<std::string> v;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) v.push_back(line);
  }
  return Tokenizer(std::move(v));
}

int Tokenizer::id(const std::string& word) const {
  const std::string lw = lowercase(word);
  auto it = std::lower_bound(sorted_.begin(), sorted_.end(), std::pair<std::string, int>{lw, -1});
  if (it != sorted_.end() && it->first == lw) return it->second;
  return kUnk;
}

std::vector<int> Tokenizer::encode_words(const std::vector<std::string>& words) const {
  std::vector<int> ids{kBos};
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<int> Tokenizer::encode(const std::string& text) const { return encode_words(split_words(text)); }

// ---- decomposition --------------------------------------------------------------

std::string PromptParts::text(const Span& s) const {
  std::vector<std::string> w(raw.begin() + s.begin, raw.begin() + s.end);
  return join_words(w);
}

std::string PromptParts::reassemble() const { return join_words(raw); }

PromptParts decompose_caption(const std::string& text) {
  PromptParts p;
  p.raw = split_words(text);
  if (p.raw.empty()) throw std::invalid_argument("decompose_caption: empty caption");
  const int n = static_cast<int>(p.raw.size());
  std::vector<std::string> lw(n);
  for (int i = 0; i < n; ++i) lw[i] = lowercase(p.raw[i]);

  int first_noun = -1;
  for (int i = 0; i < n; ++i)
    if (kSubjectNouns.count(lw[i])) {
      first_noun = i;
      break;
    }
  if (first_noun < 0) throw std::invalid_argument("decompose_caption: no recognizable subject noun in '" + text + "'");

  int pos = 0;
  for (int i = 1; i < first_noun; ++i)
    if (lw[i] == "of") {
      p.domain = {0, i};
      pos = i + 1;
      break;
    }
  while (pos < first_noun && kDeterminers.count(lw[pos])) ++pos;
  for (int i = pos; i < first_noun; ++i)
    if (!kConnectors.count(lw[i]) && !kDeterminers.count(lw[i])) p.adjectives.push_back({i, i + 1});
  p.subject = {first_noun, first_noun + 1};
  pos = first_noun + 1;
  if (pos < n && kFormNouns.count(lw[pos])) {
    p.adjectives.push_back({pos, pos + 1});
    ++pos;
  }
  int a = pos;
  while (a < n && !kDeterminers.count(lw[a]) && !is_punct(lw[a]) && !kBackgroundNouns.count(lw[a]) &&
         !kSubjectNouns.count(lw[a]))
    ++a;
  p.action = {pos, a};
  pos = a;
  while (pos < n && kDeterminers.count(lw[pos])) ++pos;
  int b = pos;
  while (b < n && !is_punct(lw[b]) && !kStopwords.count(lw[b])) ++b;
  p.background = {pos, b};
  return p;
}

// ---- attribute edits ------------------------------------------------------------

std::string to_string(AttributeKind k) {
  switch (k) {
    case AttributeKind::Color: return "color";
    case AttributeKind::Material: return "material";
    case AttributeKind::Style: return "style";
    case AttributeKind::Weather: return "weather";
  }
  return "color";
}

AttributeKind attribute_kind_from_string(const std::string& s) {
  const std::string l = lowercase(s);
  if (l == "color") return AttributeKind::Color;
  if (l == "material") return AttributeKind::Material;
  if (l == "style") return AttributeKind::Style;
  if (l == "weather") return AttributeKind::Weather;
  throw std::invalid_argument("unknown attribute kind '" + s + "'");
}

bool is_local(AttributeKind k) { return k == AttributeKind::Color || k == AttributeKind::Material; }

const std::vector<std::string>& AttributeVocabulary::values(AttributeKind k) const {
  switch (k) {
    case AttributeKind::Color: return color;
    case AttributeKind::Material: return material;
    case AttributeKind::Style: return style;
    case AttributeKind::Weather: return weather;
  }
  return color;
}

AttributeVocabulary AttributeVocabulary::from_json(const nlohmann::json& j) {
  AttributeVocabulary v;
  if (j.contains("color")) v.color = j["color"].get<std::vector<std::string>>();
  if (j.contains("material")) v.material = j["material"].get<std::vector<std::string>>();
  if (j.contains("style")) v.style = j["style"].get<std::vector<std::string>>();
  if (j.contains("weather")) v.weather = j["weather"].get<std::vector<std::string>>();
  for (const auto* list : {&v.color, &v.material, &v.style, &v.weather})
    if (list->empty()) throw std::invalid_argument("attribute vocabulary lists must be non-empty");
  return v;
}

nlohmann::json AttributeVocabulary::to_json() const {
  return {{"color", color}, {"material", material}, {"style", style}, {"weather", weather}};
}

std::string weather_phrase(const std::string& value) {
  const std::string v = lowercase(value);
  if (v == "heavy rain") return "under a heavy downpour";
  if (v == "snowfall") return "during a snowfall";
  if (v == "dense fog") return "in a dense fog";
  if (v == "night") return "at night";
  return "in " + v;
}

std::string EditRequest::revert() const {
  std::vector<std::string> w(target_words.begin(), target_words.begin() + target_span.begin);
  w.insert(w.end(), source_words.begin() + source_span.begin, source_words.begin() + source_span.end);
  w.insert(w.end(), target_words.begin() + target_span.end, target_words.end());
  return join_words(w);
}

nlohmann::json EditRequest::to_json() const {
  return {{"P", source}, {"P_star", target}, {"S_prime", edit_indices}, {"attribute", to_string(kind)},
          {"value", value}};
}

EditRequest make_edit_request(const std::string& source, const std::string& target, AttributeKind kind,
                              const std::string& value) {
  EditRequest r;
  r.source = source;
  r.target = target;
  r.kind = kind;
  r.value = value;
  r.source_words = split_words(source);
  r.target_words = split_words(target);
  const int n = static_cast<int>(r.source_words.size());
  const int m = static_cast<int>(r.target_words.size());
  int p = 0;
  while (p < n && p < m && r.source_words[p] == r.target_words[p]) ++p;
  int s = 0;
  while (s < n - p && s < m - p && r.source_words[n - 1 - s] == r.target_words[m - 1 - s]) ++s;
  r.source_span = {p, n - s};
  r.target_span = {p, m - s};
  std::set<std::string> removed;
  for (int i = r.source_span.begin; i < r.source_span.end; ++i) removed.insert(lowercase(r.source_words[i]));
  for (int i = r.target_span.begin; i < r.target_span.end; ++i) {
    const std::string lw = lowercase(r.target_words[i]);
    if (!is_stopword(lw) && !removed.count(lw)) r.edit_indices.push_back(i);
  }
  if (r.edit_indices.empty())
    throw std::invalid_argument("edit request changes no content tokens: '" + source + "' -> '" + target + "'");
  const PromptParts a = decompose_caption(source);
  const PromptParts b = decompose_caption(target);
  if (lowercase(a.subject_text()) != lowercase(b.subject_text()))
    throw std::invalid_argument("edit changes the subject ('" + a.subject_text() + "' -> '" + b.subject_text() + "')");
  return r;
}

namespace {

void require_in_vocab(const AttributeVocabulary& vocab, AttributeKind kind, const std::string& value) {
  const auto& vals = vocab.values(kind);
  if (std::find(vals.begin(), vals.end(), value) != vals.end()) return;
  std::string list;
  for (const auto& v : vals) list += (list.empty() ? "" : ", ") + v;
  throw std::invalid_argument("unknown " + to_string(kind) + " value '" + value + "' (vocabulary: " + list + ")");
}

// Index of the article governing the noun phrase that starts at `phrase`.
int article_before(const std::vector<std::string>& w, int phrase) {
  const int i = phrase - 1;
  if (i < 0) return -1;
  const std::string l = lowercase(w[i]);
  return (l == "a" || l == "an") ? i : -1;
}

}  // namespace

EditRequest edit_attribute(const PromptParts& parts, AttributeKind kind, const std::string& value,
                           const AttributeVocabulary& vocab) {
  require_in_vocab(vocab, kind, value);
  std::vector<std::string> w = parts.raw;
  const std::vector<std::string> val = split_value(value);
  const auto& colors = vocab.color;
  auto is_color = [&](const std::string& x) { return std::find(colors.begin(), colors.end(), lowercase(x)) != colors.end(); };

  // Start of the noun phrase: first adjective before the subject, else the subject.
  int phrase = parts.subject.begin;
  for (const Span& a : parts.adjectives)
    if (a.end <= parts.subject.begin) {
      phrase = std::min(phrase, a.begin);
    }

  switch (kind) {
    case AttributeKind::Color: {
      const int before = parts.subject.begin - 1;
      const bool adjacent_adj = std::any_of(parts.adjectives.begin(), parts.adjectives.end(),
                                            [&](const Span& a) { return a.end == parts.subject.begin; });
      if (adjacent_adj && is_color(w[before])) {
        w.erase(w.begin() + before);
        w.insert(w.begin() + before, val.begin(), val.end());
      } else {
        w.insert(w.begin() + parts.subject.begin, val.begin(), val.end());
        if (phrase == parts.subject.begin) phrase = parts.subject.begin;
      }
      fix_article(w, article_before(w, phrase));
      break;
    }
    case AttributeKind::Material: {
      // Drop existing modifiers in front of the subject, then rebuild.
      int subj = parts.subject.begin;
      w.erase(w.begin() + phrase, w.begin() + subj);
      subj = phrase;
      w.insert(w.begin() + subj, val.begin(), val.end());
      subj += static_cast<int>(val.size());
      const bool has_form = subj + 1 < static_cast<int>(w.size()) && kFormNouns.count(lowercase(w[subj + 1]));
      if (!has_form) w.insert(w.begin() + subj + 1, is_animal(w[subj]) ? "sculpture" : "model");
      fix_article(w, article_before(w, phrase));
      break;
    }
    case AttributeKind::Style: {
      if (!parts.domain.empty()) {
        int b = parts.domain.begin;
        if (kDeterminers.count(lowercase(w[b])) && b + 1 < parts.domain.end) ++b;
        w.erase(w.begin() + b, w.begin() + parts.domain.end);
        w.insert(w.begin() + b, val.begin(), val.end());
        fix_article(w, b - 1);
      } else {
        const bool cap = std::isupper(static_cast<unsigned char>(w[0][0]));
        if (kDeterminers.count(lowercase(w[0]))) w[0] = lowercase(w[0]);
        std::vector<std::string> pre{cap ? "A" : "a"};
        pre.insert(pre.end(), val.begin(), val.end());
        pre.push_back("of");
        if (!kDeterminers.count(lowercase(w[0]))) pre.push_back("a");
        w.insert(w.begin(), pre.begin(), pre.end());
        fix_article(w, 0);
      }
      break;
    }
    case AttributeKind::Weather: {
      const auto phrase_words = split_words(weather_phrase(value));
      int end = static_cast<int>(w.size());
      while (end > 0 && is_punct(w[end - 1])) --end;
      w.insert(w.begin() + end, phrase_words.begin(), phrase_words.end());
      break;
    }
  }
  return make_edit_request(parts.reassemble(), join_words(w), kind, value);
}

std::string render_instruction(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::Color:
      return "I want to change the color of the object in the source image. Please generate all possible target "
             "text prompts given the source text prompt describing the source image. For example, the source is "
             "\"a cat\", you can generate \"a blue cat\".";
    case AttributeKind::Material:
      return "I want to change the material of the object in the source image. Please generate all possible target "
             "text prompts given the source text prompt describing the source image. For example, source is "
             "\"a cat\", you can generate \"a wooden cat sculpture\".";
    case AttributeKind::Style:
      return "I want to change the image style of source images without perturbing the content. Please generate "
             "all possible target text prompts given the source text prompt describing the source image. For "
             "example, source is 'a cat', you can generate 'a watercolor cat'.";
    case AttributeKind::Weather:
      return "I want to change the weather or season condition of the source image. Please generate all possible "
             "target text prompts given the source text prompt that describes the source image, only changing the "
             "weather conditions, or adding a description of the weather if not already present.";
  }
  return {};
}

std::string repaint_question(const std::string& object_name) {
  return "If the size or position of the " + object_name +
         " is changed, what is the remaining area that should be filled?";
}

// ---- HTTP client ----------------------------------------------------------------

HttpLanguageClient::HttpLanguageClient(Options opts) : opts_(std::move(opts)) {
  if (opts_.base_url.empty()) throw std::invalid_argument("HttpLanguageClient: base_url is required");
  if (opts_.retries < 0) throw std::invalid_argument("HttpLanguageClient: retries must be >= 0");
}

std::vector<std::string> HttpLanguageClient::complete(const std::string& instruction, const std::string& caption) {
  httplib::Client cli(opts_.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts_.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  const std::string body = nlohmann::json{{"template", instruction}, {"caption", caption}}.dump();
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
    auto res = cli.Post(opts_.path, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("candidates").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("language client: malformed response: ") + e.what());
    }
  }
  throw BackendError("language client: " + opts_.base_url + opts_.path + " unreachable (" + last_error + ")");
}

LlmEditResult llm_edit(LanguageClient& client, const std::string& caption, AttributeKind kind) {
  LlmEditResult out;
  for (const auto& cand : client.complete(render_instruction(kind), caption)) {
    try {
      EditRequest probe = make_edit_request(caption, cand, kind, "");
      std::vector<std::string> vw;
      for (int i : probe.edit_indices) vw.push_back(probe.target_words[i]);
      probe.value = join_words(vw);
      out.accepted.push_back(std::move(probe));
    } catch (const std::invalid_argument& e) {
      spdlog::info("llm_edit: dropped candidate '{}': {}", cand, e.what());
      out.rejected.emplace_back(cand, e.what());
    }
  }
  return out;
}

}  // namespace segedit
