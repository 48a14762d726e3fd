#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace lvlmlens::attn {

enum class Colormap { Viridis, Hot };

using Rgb = std::array<double, 3>;  // components in [0,1]

std::string_view colormap_name(Colormap cm) noexcept;
std::optional<Colormap> parse_colormap(std::string_view s) noexcept;

/// Linear interpolation between the two nearest of 256 tabulated levels; value clamped to [0,1].
Rgb colormap_lookup(Colormap cm, double value);

}  // namespace lvlmlens::attn
