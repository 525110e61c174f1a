#pragma once

#include "pfedhr/rng.hpp"
#include "pfedhr/tensor.hpp"

namespace pfedhr {

inline constexpr int kCropPad = 2;
inline constexpr double kVectorNoiseSigma = 0.05;

// One stochastic view of a batch for the contrastive loss. Images get a
// random pad-and-crop plus horizontal flip, vector data additive Gaussian noise.
template <typename S>
Tensor<S> contrastive_view(const Tensor<S>& batch, Rng& rng) {
  if (batch.rank() == 2) {
    Tensor<S> out = batch;
    for (auto& v : out.data) v += static_cast<S>(kVectorNoiseSigma * rng.normal());
    return out;
  }
  if (batch.rank() != 4) throw ShapeMismatch("contrastive_view expects rank-2 or rank-4 batches");

  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor<S> out(batch.shape);
  for (int i = 0; i < n; ++i) {
    const int off_y = rng.below(2 * kCropPad + 1) - kCropPad;
    const int off_x = rng.below(2 * kCropPad + 1) - kCropPad;
    const bool flip = rng.coin();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sx = flip ? w - 1 - x : x;
          const int yy = y + off_y;
          const int xx = sx + off_x;
          out.at(i, ch, y, x) =
              (yy >= 0 && yy < h && xx >= 0 && xx < w) ? batch.at(i, ch, yy, xx) : S(0);
        }
  }
  return out;
}

}  // namespace pfedhr
