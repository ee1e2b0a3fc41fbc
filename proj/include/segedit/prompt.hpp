#pragma once

// Caption parsing and attribute-directed caption edits. The rule-based editor
// is the default; an external language model can propose candidates through
// LanguageClient, which are accepted only if they pass the same diff rules.

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segedit/error.hpp"

namespace segedit {

// ---- tokens ---------------------------------------------------------------

// Splits on whitespace and peels punctuation into separate tokens.
std::vector<std::string> split_words(const std::string& text);
// Inverse of split_words for canonical spacing: punctuation attaches left.
std::string join_words(const std::vector<std::string>& words);
std::string lowercase(std::string s);

class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kUnk = 1;

  // Built-in vocabulary covering the shape world, attribute vocabularies and
  // common caption words.
  static Tokenizer builtin();
  // One token per line; the first two lines must be <bos> and <unk>.
  static Tokenizer from_file(const std::string& path);
  explicit Tokenizer(std::vector<std::string> vocab);

  int id(const std::string& word) const;  // case-insensitive; kUnk if absent
  // <bos> followed by one id per word.
  std::vector<int> encode(const std::string& text) const;
  std::vector<int> encode_words(const std::vector<std::string>& words) const;
  int size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

 private:
  std::vector<std::string> vocab_;
  std::vector<std::pair<std::string, int>> sorted_;
};

// ---- decomposition ----------------------------------------------------------

struct Span {
  int begin = 0;
  int end = 0;  // exclusive
  bool empty() const { return end <= begin; }
  int size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct PromptParts {
  std::vector<std::string> raw;
  Span domain;
  std::vector<Span> adjectives;  // modifiers, including a trailing form noun
  Span subject;
  Span action;
  Span background;

  std::string text(const Span& s) const;
  std::string subject_text() const { return text(subject); }
  // Reassembles the caption from raw tokens.
  std::string reassemble() const;
};

bool is_subject_noun(const std::string& word);
bool is_animal(const std::string& word);
bool is_stopword(const std::string& word);

// Throws std::invalid_argument if no subject noun is recognizable.
PromptParts decompose_caption(const std::string& text);

// ---- attribute edits ----------------------------------------------------------

enum class AttributeKind { Color, Material, Style, Weather };
std::string to_string(AttributeKind k);
AttributeKind attribute_kind_from_string(const std::string& s);
bool is_local(AttributeKind k);  // Color and Material edit the object only

struct AttributeVocabulary {
  std::vector<std::string> color{"red", "blue", "green", "yellow", "white", "black", "brown", "purple"};
  std::vector<std::string> material{"wooden", "metallic", "stone", "glass", "plastic"};
  std::vector<std::string> style{"watercolor painting", "pencil sketch", "digital painting", "oil painting"};
  std::vector<std::string> weather{"heavy rain", "snowfall", "dense fog", "night"};

  const std::vector<std::string>& values(AttributeKind k) const;
  static AttributeVocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct EditRequest {
  std::string source;
  std::string target;
  std::vector<std::string> source_words;
  std::vector<std::string> target_words;
  std::vector<int> edit_indices;  // S': positions in target_words
  Span source_span;               // the single differing span in source_words
  Span target_span;               // ... and its replacement in target_words
  AttributeKind kind = AttributeKind::Color;
  std::string value;

  // Replaces the target span with the source span: must give `source` back.
  std::string revert() const;
  nlohmann::json to_json() const;
};

// Single-span diff of two captions. S' is the set of non-stopword tokens in
// the target span that do not occur in the source span. Throws if S' is
// empty or the subject noun changed.
EditRequest make_edit_request(const std::string& source, const std::string& target, AttributeKind kind,
                              const std::string& value);

EditRequest edit_attribute(const PromptParts& parts, AttributeKind kind, const std::string& value,
                           const AttributeVocabulary& vocab = {});

// Weather value -> appended phrase.
std::string weather_phrase(const std::string& value);

// The instruction template sent to a language model for each attribute kind.
std::string render_instruction(AttributeKind kind);
// Question sent to a vision-language model about the area left behind by a
// geometry edit.
std::string repaint_question(const std::string& object_name);

// ---- language client ----------------------------------------------------------

class LanguageClient {
 public:
  virtual ~LanguageClient() = default;
  // Throws BackendError when the backend cannot be reached.
  virtual std::vector<std::string> complete(const std::string& instruction, const std::string& caption) = 0;
};

// POSTs {"template", "caption"} to <base_url><path> and reads {"candidates": [...]}.
class HttpLanguageClient final : public LanguageClient {
 public:
  struct Options {
    std::string base_url;  // e.g. http://127.0.0.1:8080
    std::string path = "/v1/edit";
    std::chrono::milliseconds timeout{10000};
    int retries = 2;
  };
  explicit HttpLanguageClient(Options opts);
  std::vector<std::string> complete(const std::string& instruction, const std::string& caption) override;

 private:
  Options opts_;
};

struct LlmEditResult {
  std::vector<EditRequest> accepted;
  std::vector<std::pair<std::string, std::string>> rejected;  // (candidate, reason)
};

LlmEditResult llm_edit(LanguageClient& client, const std::string& caption, AttributeKind kind);

}  // namespace segedit
