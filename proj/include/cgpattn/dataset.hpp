#pragma once

#include <string>

#include "cgpattn/transformer.hpp"

namespace cgpattn {

enum class DatasetKind { Images, Grammar };

struct ToyDataset {
  DatasetKind kind{DatasetKind::Images};
  ExampleSet train;
  ExampleSet val;
  ExampleSet test;
  ExampleSet ood;  // grammar: longer strings
  std::uint64_t seed{0};
  int classes{0};
  int side{0};
  int patch{0};
  int vocab{0};
  int max_len{0};

  Index token_width() const;
  Index sequence_length() const;
};

/// Class-conditional textured images (per-class Gaussian blob + per-class
/// sinusoid), tokenized into (side/patch)^2 patch vectors. Split sizes are
/// classes*per_class train and classes*ceil(per_class/4) for val and test.
ToyDataset make_toy_images(int classes, int per_class, int side, int patch,
                           std::uint64_t seed);

/// Balanced-bracket-with-distractors strings over a 12-symbol vocabulary;
/// label is well-formedness. The OOD split holds longer strings with
/// length in (max_len, 2*max_len].
ToyDataset make_toy_grammar(int size, int max_len, std::uint64_t seed);

/// True if the bracket structure (ignoring distractor symbols) is balanced.
bool grammar_accepts(const std::vector<int>& symbols);

constexpr int kGrammarVocab = 12;

/// Reassembles the image pixel grid from patch tokens (row-major patches).
Matrix image_from_tokens(const Matrix& tokens, int side, int patch);
Matrix tokens_from_image(const Matrix& image, int patch);

/// Stand-in outlier sets for the detection suite. Names: "grammar_noise",
/// "inverted_texture", "pure_noise", "shuffled_patches".
ExampleSet make_ood_image_set(const std::string& name, const ToyDataset& base,
                              int count, std::uint64_t seed);
const std::vector<std::string>& ood_image_set_names();

}  // namespace cgpattn
