#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ihk {

// The four canonical orthographic views, in storage order.
enum class ViewLabel { front = 0, right = 1, back = 2, left = 3 };

inline constexpr std::array<ViewLabel, 4> kCanonicalViews{ViewLabel::front, ViewLabel::right, ViewLabel::back,
                                                           ViewLabel::left};

enum class BodyPart { body = 0, head = 1 };

inline std::string_view to_string(ViewLabel v) {
  switch (v) {
    case ViewLabel::front: return "front";
    case ViewLabel::right: return "right";
    case ViewLabel::back: return "back";
    case ViewLabel::left: return "left";
  }
  return "?";
}

inline ViewLabel view_label_from_string(std::string_view s) {
  for (auto v : kCanonicalViews) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown view label '" + std::string(s) + "'");
}

inline std::string_view to_string(BodyPart p) { return p == BodyPart::body ? "body" : "head"; }

}  // namespace ihk
