#include "cgpattn/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace cgpattn {

Index ToyDataset::token_width() const {
  if (kind == DatasetKind::Images) return Index(patch) * patch;
  return 1;
}

Index ToyDataset::sequence_length() const {
  if (kind == DatasetKind::Images) {
    const Index per_side = side / patch;
    return per_side * per_side;
  }
  return max_len;
}

Matrix tokens_from_image(const Matrix& image, int patch) {
  const int side = static_cast<int>(image.rows());
  if (image.cols() != side) throw DimensionError("images must be square");
  if (side % patch != 0)
    throw DimensionError("image side must be divisible by the patch size");
  const int per_side = side / patch;
  Matrix tokens(per_side * per_side, patch * patch);
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px) {
      const int token = py * per_side + px;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          tokens(token, y * patch + x) = image(py * patch + y, px * patch + x);
    }
  return tokens;
}

Matrix image_from_tokens(const Matrix& tokens, int side, int patch) {
  const int per_side = side / patch;
  if (tokens.rows() != per_side * per_side || tokens.cols() != patch * patch)
    throw DimensionError("token matrix does not tile the requested image");
  Matrix image(side, side);
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px) {
      const int token = py * per_side + px;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          image(py * patch + y, px * patch + x) = tokens(token, y * patch + x);
    }
  return image;
}

namespace {

struct ClassRecipe {
  double center_x, center_y;
  double blob_width;
  double frequency;
  double orientation;
};

Matrix render_image(const ClassRecipe& recipe, int side, Rng& rng) {
  const double jitter_x = rng.uniform(-0.8, 0.8);
  const double jitter_y = rng.uniform(-0.8, 0.8);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double blob_amp = rng.uniform(0.8, 1.2);
  const double wave_amp = rng.uniform(0.35, 0.55);
  Matrix image(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dx = x - (recipe.center_x + jitter_x);
      const double dy = y - (recipe.center_y + jitter_y);
      const double blob =
          blob_amp * std::exp(-(dx * dx + dy * dy) /
                              (2.0 * recipe.blob_width * recipe.blob_width));
      const double axis = x * std::cos(recipe.orientation) +
                          y * std::sin(recipe.orientation);
      const double wave =
          wave_amp * std::sin(recipe.frequency * axis + phase);
      const double noise = 0.05 * rng.gaussian();
      image(y, x) = std::clamp(0.25 + 0.5 * blob + wave + noise, 0.0, 1.0);
    }
  }
  return image;
}

ExampleSet make_image_split(const std::vector<ClassRecipe>& recipes, int count_per_class,
                            int side, int patch, Rng& rng) {
  ExampleSet out;
  for (int c = 0; c < static_cast<int>(recipes.size()); ++c) {
    for (int i = 0; i < count_per_class; ++i) {
      Example ex;
      ex.tokens = tokens_from_image(render_image(recipes[static_cast<std::size_t>(c)], side, rng), patch);
      ex.label = c;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace

ToyDataset make_toy_images(int classes, int per_class, int side, int patch,
                           std::uint64_t seed) {
  if (classes < 2 || per_class < 1 || side < 2 || patch < 1)
    throw ValueError("make_toy_images: invalid sizes");
  if (side % patch != 0)
    throw DimensionError("image side must be divisible by the patch size");

  Rng rng(Rng::derive(seed, 11));
  std::vector<ClassRecipe> recipes;
  for (int c = 0; c < classes; ++c) {
    ClassRecipe r;
    r.center_x = rng.uniform(1.0, side - 2.0);
    r.center_y = rng.uniform(1.0, side - 2.0);
    r.blob_width = rng.uniform(side / 6.0, side / 3.0);
    r.frequency = rng.uniform(0.8, 2.4);
    r.orientation = rng.uniform(0.0, 3.141592653589793);
    recipes.push_back(r);
  }

  ToyDataset ds;
  ds.kind = DatasetKind::Images;
  ds.seed = seed;
  ds.classes = classes;
  ds.side = side;
  ds.patch = patch;
  const int holdout = (per_class + 3) / 4;
  ds.train = make_image_split(recipes, per_class, side, patch, rng);
  ds.val = make_image_split(recipes, holdout, side, patch, rng);
  ds.test = make_image_split(recipes, holdout, side, patch, rng);
  return ds;
}

bool grammar_accepts(const std::vector<int>& symbols) {
  std::vector<int> stack;
  for (int s : symbols) {
    switch (s) {
      case 0:
      case 2:
        stack.push_back(s);
        break;
      case 1:
        if (stack.empty() || stack.back() != 0) return false;
        stack.pop_back();
        break;
      case 3:
        if (stack.empty() || stack.back() != 2) return false;
        stack.pop_back();
        break;
      default:
        break;  // distractors 4..11
    }
  }
  return stack.empty();
}

namespace {

std::vector<int> balanced_brackets(int pairs, Rng& rng) {
  std::vector<int> out;
  std::vector<int> stack;
  int remaining_opens = pairs;
  while (remaining_opens > 0 || !stack.empty()) {
    const bool must_open = stack.empty();
    const bool must_close = remaining_opens == 0;
    const bool open = !must_close && (must_open || rng.below(2) == 0);
    if (open) {
      const int type = rng.below(2) == 0 ? 0 : 2;
      out.push_back(type);
      stack.push_back(type);
      --remaining_opens;
    } else {
      out.push_back(stack.back() == 0 ? 1 : 3);
      stack.pop_back();
    }
  }
  return out;
}

std::vector<int> grammar_string(int length, bool accept, Rng& rng) {
  const int max_pairs = std::max(1, length / 2);
  const int pairs = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_pairs)));
  std::vector<int> brackets = balanced_brackets(pairs, rng);
  while (static_cast<int>(brackets.size()) > length)
    brackets = balanced_brackets(std::max(1, pairs / 2), rng);

  std::vector<int> symbols = brackets;
  while (static_cast<int>(symbols.size()) < length) {
    const std::size_t pos = rng.below(symbols.size() + 1);
    const int distractor = 4 + static_cast<int>(rng.below(8));
    symbols.insert(symbols.begin() + static_cast<std::ptrdiff_t>(pos), distractor);
  }
  if (accept) return symbols;

  // Mutate until the bracket structure breaks.
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<int> broken = symbols;
    const std::size_t pos = rng.below(broken.size());
    if (broken[pos] <= 3) {
      const int replacement = static_cast<int>(rng.below(4));
      broken[pos] = replacement;
    } else {
      broken[pos] = static_cast<int>(rng.below(4));
    }
    if (!grammar_accepts(broken)) return broken;
  }
  symbols.insert(symbols.begin(), 0);  // unmatched open bracket
  symbols.pop_back();
  if (!grammar_accepts(symbols)) return symbols;
  symbols[0] = 1;
  return symbols;  // unmatched close at the front
}

Example grammar_example(int min_len, int max_len, bool accept, Rng& rng) {
  const int length =
      min_len + static_cast<int>(rng.below(
                    static_cast<std::uint64_t>(max_len - min_len + 1)));
  const std::vector<int> symbols = grammar_string(length, accept, rng);
  Example ex;
  ex.tokens.resize(static_cast<Index>(symbols.size()), 1);
  for (std::size_t i = 0; i < symbols.size(); ++i)
    ex.tokens(static_cast<Index>(i), 0) = symbols[i];
  ex.label = accept ? 1 : 0;
  return ex;
}

ExampleSet grammar_split(int count, int min_len, int max_len, Rng& rng) {
  ExampleSet out;
  for (int i = 0; i < count; ++i)
    out.push_back(grammar_example(min_len, max_len, i % 2 == 0, rng));
  return out;
}

}  // namespace

ToyDataset make_toy_grammar(int size, int max_len, std::uint64_t seed) {
  if (max_len < 4) throw ValueError("make_toy_grammar: max_len >= 4 required");
  if (size < 4) throw ValueError("make_toy_grammar: size too small");
  Rng rng(Rng::derive(seed, 13));
  ToyDataset ds;
  ds.kind = DatasetKind::Grammar;
  ds.seed = seed;
  ds.classes = 2;
  ds.vocab = kGrammarVocab;
  ds.max_len = max_len;
  const int holdout = (size + 3) / 4;
  ds.train = grammar_split(size, 4, max_len, rng);
  ds.val = grammar_split(holdout, 4, max_len, rng);
  ds.test = grammar_split(holdout, 4, max_len, rng);
  ds.ood = grammar_split(holdout, max_len + 1, 2 * max_len, rng);
  return ds;
}

const std::vector<std::string>& ood_image_set_names() {
  static const std::vector<std::string> names = {
      "grammar_noise", "inverted_texture", "pure_noise", "shuffled_patches"};
  return names;
}

ExampleSet make_ood_image_set(const std::string& name, const ToyDataset& base,
                              int count, std::uint64_t seed) {
  if (base.kind != DatasetKind::Images)
    throw ValueError("outlier sets are derived from an image dataset");
  Rng rng(Rng::derive(seed, 17));
  ExampleSet out;
  const int side = base.side;
  const int patch = base.patch;
  const auto base_example = [&](int i) -> const Example& {
    return base.test[static_cast<std::size_t>(i) % base.test.size()];
  };

  if (name == "pure_noise") {
    for (int i = 0; i < count; ++i) {
      Matrix image(side, side);
      for (Index j = 0; j < image.size(); ++j) image(j) = rng.uniform();
      out.push_back({tokens_from_image(image, patch), 0});
    }
  } else if (name == "inverted_texture") {
    for (int i = 0; i < count; ++i) {
      Matrix image = image_from_tokens(base_example(i).tokens, side, patch);
      image = Matrix::Ones(side, side) - image;
      out.push_back({tokens_from_image(image, patch), 0});
    }
  } else if (name == "shuffled_patches") {
    for (int i = 0; i < count; ++i) {
      Matrix tokens = base_example(i).tokens;
      for (Index r = tokens.rows(); r > 1; --r) {
        const Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(r)));
        tokens.row(r - 1).swap(tokens.row(j));
      }
      out.push_back({tokens, 0});
    }
  } else if (name == "grammar_noise") {
    // Barcode renderings of grammar strings: one column band per symbol.
    for (int i = 0; i < count; ++i) {
      const std::vector<int> symbols =
          grammar_string(side, rng.below(2) == 0, rng);
      Matrix image(side, side);
      for (int x = 0; x < side; ++x) {
        const double level =
            static_cast<double>(symbols[static_cast<std::size_t>(x) %
                                        symbols.size()]) /
            (kGrammarVocab - 1);
        for (int y = 0; y < side; ++y)
          image(y, x) = std::clamp(level + 0.02 * rng.gaussian(), 0.0, 1.0);
      }
      out.push_back({tokens_from_image(image, patch), 0});
    }
  } else {
    throw ValueError("unknown outlier set: " + name);
  }
  return out;
}

}  // namespace cgpattn
