#pragma once

#include "cgpattn/dataset.hpp"

namespace cgpattn {

enum class CorruptionCategory { Noise, Blur, Weather, Digital };

std::string to_string(CorruptionCategory c);
CorruptionCategory corruption_category_from_string(const std::string& name);
const std::vector<CorruptionCategory>& corruption_categories();

struct CorruptionSpec {
  CorruptionCategory category{CorruptionCategory::Noise};
  int severity{1};  // 1..5
  std::uint64_t seed{0};
  void validate() const;
};

/// Applies the corruption to every split of an image dataset; labels are
/// unchanged. Grammar datasets are rejected.
ToyDataset corrupt(const ToyDataset& dataset, const CorruptionSpec& spec);

Matrix corrupt_image(const Matrix& image, const CorruptionSpec& spec, Rng& rng);

/// Additive Gaussian pixel noise; scale 0 leaves the image unchanged.
Matrix add_pixel_noise(const Matrix& image, double scale, Rng& rng);

}  // namespace cgpattn
