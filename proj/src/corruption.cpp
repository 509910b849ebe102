#include "cgpattn/corruption.hpp"

#include <algorithm>
#include <cmath>

namespace cgpattn {

std::string to_string(CorruptionCategory c) {
  switch (c) {
    case CorruptionCategory::Noise: return "noise";
    case CorruptionCategory::Blur: return "blur";
    case CorruptionCategory::Weather: return "weather";
    case CorruptionCategory::Digital: return "digital";
  }
  return "unknown";
}

CorruptionCategory corruption_category_from_string(const std::string& name) {
  if (name == "noise") return CorruptionCategory::Noise;
  if (name == "blur") return CorruptionCategory::Blur;
  if (name == "weather") return CorruptionCategory::Weather;
  if (name == "digital") return CorruptionCategory::Digital;
  throw ValueError("unknown corruption category: " + name);
}

const std::vector<CorruptionCategory>& corruption_categories() {
  static const std::vector<CorruptionCategory> cats = {
      CorruptionCategory::Noise, CorruptionCategory::Blur,
      CorruptionCategory::Weather, CorruptionCategory::Digital};
  return cats;
}

void CorruptionSpec::validate() const {
  if (severity < 1 || severity > 5)
    throw ValueError("corruption severity must lie in 1..5");
}

namespace {

Matrix box_blur_pass(const Matrix& image) {
  const Index side = image.rows();
  Matrix out(side, side);
  for (Index y = 0; y < side; ++y) {
    for (Index x = 0; x < side; ++x) {
      double acc = 0.0;
      int n = 0;
      for (Index dy = -1; dy <= 1; ++dy)
        for (Index dx = -1; dx <= 1; ++dx) {
          const Index yy = y + dy;
          const Index xx = x + dx;
          if (yy < 0 || yy >= side || xx < 0 || xx >= side) continue;
          acc += image(yy, xx);
          ++n;
        }
      out(y, x) = acc / n;
    }
  }
  return out;
}

}  // namespace

Matrix add_pixel_noise(const Matrix& image, double scale, Rng& rng) {
  Matrix out = image;
  for (Index i = 0; i < out.size(); ++i) out(i) += scale * rng.gaussian();
  return out;
}

Matrix corrupt_image(const Matrix& image, const CorruptionSpec& spec,
                     Rng& rng) {
  spec.validate();
  const double sev = spec.severity;
  switch (spec.category) {
    case CorruptionCategory::Noise:
      return add_pixel_noise(image, 0.05 * sev, rng);
    case CorruptionCategory::Blur: {
      Matrix out = image;
      for (int pass = 0; pass < spec.severity; ++pass)
        out = box_blur_pass(out);
      return out;
    }
    case CorruptionCategory::Weather: {
      const double contrast = 1.0 - 0.08 * sev;
      const double brightness = 0.1 * sev;
      Matrix out = image;
      for (Index i = 0; i < out.size(); ++i)
        out(i) = (out(i) - 0.5) * contrast + 0.5 + brightness;
      return out;
    }
    case CorruptionCategory::Digital: {
      const double levels = 10.0 - sev;
      Matrix out = image;
      for (Index i = 0; i < out.size(); ++i) {
        const double clamped = std::clamp(out(i), 0.0, 1.0);
        out(i) = std::round(clamped * (levels - 1.0)) / (levels - 1.0);
      }
      return out;
    }
  }
  throw ValueError("unknown corruption category");
}

ToyDataset corrupt(const ToyDataset& dataset, const CorruptionSpec& spec) {
  if (dataset.kind != DatasetKind::Images)
    throw ValueError("corruption applies to image datasets only");
  spec.validate();
  ToyDataset out = dataset;
  Rng rng(Rng::derive(spec.seed, 23));
  const auto apply = [&](ExampleSet& split) {
    for (auto& ex : split) {
      const Matrix image =
          image_from_tokens(ex.tokens, dataset.side, dataset.patch);
      ex.tokens =
          tokens_from_image(corrupt_image(image, spec, rng), dataset.patch);
    }
  };
  apply(out.train);
  apply(out.val);
  apply(out.test);
  return out;
}

}  // namespace cgpattn
