#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlsp/grid.hpp"
#include "dlsp/morpho.hpp"

namespace dlsp::presets {

/// Top half acceptor, bottom half donor. With odd height the extra row goes to the donor.
inline Grid<double> bilayer(int height = 101, int width = 101) {
  Grid<double> g(height, width);
  for (int r = height / 2; r < height; ++r)
    for (int c = 0; c < width; ++c) g(r, c) = 1.0;
  return g;
}

/// Bilayer with a donor slab of `thickness` rows against the bottom electrode.
inline Grid<double> bilayer_slab(int thickness, int height = 101, int width = 101) {
  Grid<double> g(height, width);
  for (int r = std::max(0, height - thickness); r < height; ++r)
    for (int c = 0; c < width; ++c) g(r, c) = 1.0;
  return g;
}

/// Full-height alternating stripes, donor first, with n = round(width / (2 * stripe_width)) pairs so
/// the pattern stays periodic laterally. Donor and acceptor totals are fixed at floor(width / 2) and
/// the remainder, each spread as evenly as possible over the n stripes.
inline Grid<double> columns(int stripe_width, int height = 101, int width = 101) {
  const int pairs = std::clamp(static_cast<int>(std::lround(static_cast<double>(width) / (2.0 * std::max(stripe_width, 1)))), 1, std::max(width / 2, 1));
  const int donor_total = width / 2, acceptor_total = width - donor_total;
  Grid<double> g(height, width);
  int c = 0;
  for (int j = 0; j < pairs; ++j) {
    const int d = (j + 1) * donor_total / pairs - j * donor_total / pairs;
    const int a = (j + 1) * acceptor_total / pairs - j * acceptor_total / pairs;
    for (int r = 0; r < height; ++r)
      for (int k = c; k < c + d; ++k) g(r, k) = 1.0;
    c += d + a;
  }
  return g;
}

/// Rows [first_row, last_row] forced to acceptor.
inline Grid<double> with_acceptor_stripe(Grid<double> g, int first_row, int last_row) {
  for (int r = std::max(first_row, 0); r <= std::min(last_row, g.height - 1); ++r)
    for (int c = 0; c < g.width; ++c) g(r, c) = 0.0;
  return g;
}

/// columns(4) with an acceptor stripe over the bottom six rows, cutting donor off the anode.
inline Grid<double> blocking_layer(int height = 101, int width = 101) {
  return with_acceptor_stripe(columns(4, height, width), height - 6, height - 1);
}

/// Acceptor discs of radius 5 on a 16-pixel lattice in a donor matrix, odd rows offset.
inline Grid<double> blob_field(int height = 101, int width = 101) {
  Grid<double> g(height, width);
  std::fill(g.data.begin(), g.data.end(), 1.0);
  constexpr int pitch = 16, radius = 5;
  for (int cy = pitch / 2, row = 0; cy < height; cy += pitch, ++row) {
    for (int cx = (row % 2) * pitch / 2; cx < width + pitch; cx += pitch) {
      for (int r = cy - radius; r <= cy + radius; ++r) {
        if (r < 0 || r >= height) continue;
        for (int dc = -radius; dc <= radius; ++dc) {
          if ((r - cy) * (r - cy) + dc * dc <= radius * radius) g(r, wrap_col(cx + dc, width)) = 0.0;
        }
      }
    }
  }
  return g;
}

inline std::vector<std::string> names() { return {"bilayer", "columns_w4", "columns_w10", "blocking_layer", "blob_field"}; }

inline std::optional<Grid<double>> by_name(std::string_view name, int height = 101, int width = 101) {
  if (name == "bilayer") return bilayer(height, width);
  if (name == "columns_w4") return columns(4, height, width);
  if (name == "columns_w10") return columns(10, height, width);
  if (name == "blocking_layer") return blocking_layer(height, width);
  if (name == "blob_field") return blob_field(height, width);
  return std::nullopt;
}

}  // namespace dlsp::presets
