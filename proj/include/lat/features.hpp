#pragma once

#include <span>
#include <string>
#include <vector>

#include "lat/embedding.hpp"
#include "lat/ops.hpp"

namespace lat {

// Pixel-space rectangle with top-left corner (x, y).
struct Box {
  double x = 0, y = 0, width = 0, height = 0;
};

struct DetectedObject {
  std::string label;
  Box box;
  std::vector<double> visual;
  double confidence = 1.0;
};

/// Per-image bundle: V (m x d_v), L (m x d_w), B (m x 5).
/// B columns are (cx, cy, h, w, area), each normalized to [0, 1].
struct SceneFeatures {
  Tensor V;
  Tensor L;
  Tensor B;
  std::vector<std::string> labels;
  std::vector<double> confidence;

  std::size_t m() const { return V.dim(0); }
  std::size_t d_v() const { return V.dim(1); }
  std::size_t d_w() const { return L.dim(1); }
};

inline SceneFeatures build_scene_features(std::span<const DetectedObject> objects, const EmbeddingTable& table,
                                          double image_w, double image_h) {
  if (objects.empty()) throw DegenerateInputError("scene has no objects");
  if (!(image_w > 0) || !(image_h > 0)) throw ContractError("image dimensions must be positive");
  std::size_t m = objects.size();
  std::size_t dv = objects[0].visual.size();
  if (dv == 0) throw DimensionError("object visual feature is empty");
  std::size_t dw = table.dim();
  std::vector<double> v, l, b;
  v.reserve(m * dv);
  l.reserve(m * dw);
  b.reserve(m * 5);
  SceneFeatures out;
  for (const auto& o : objects) {
    if (o.visual.size() != dv) throw DimensionError("visual features of differing length within one scene");
    const Box& bx = o.box;
    if (bx.x < 0 || bx.y < 0 || bx.width < 0 || bx.height < 0 || bx.x + bx.width > image_w ||
        bx.y + bx.height > image_h) {
      throw ContractError("box of '" + o.label + "' lies outside the image");
    }
    if (o.confidence < 0 || o.confidence > 1) throw ContractError("object confidence outside [0, 1]");
    v.insert(v.end(), o.visual.begin(), o.visual.end());
    auto emb = table.embed_label(o.label);
    l.insert(l.end(), emb.begin(), emb.end());
    double h = bx.height / image_h;
    double w = bx.width / image_w;
    b.push_back((bx.x + bx.width / 2.0) / image_w);
    b.push_back((bx.y + bx.height / 2.0) / image_h);
    b.push_back(h);
    b.push_back(w);
    b.push_back(h * w);
    out.labels.push_back(o.label);
    out.confidence.push_back(o.confidence);
  }
  out.V = Tensor::matrix(m, dv, std::move(v));
  out.L = Tensor::matrix(m, dw, std::move(l));
  out.B = Tensor::matrix(m, 5, std::move(b));
  return out;
}

/// O = V || B, visual columns first.
inline Tensor concat_visual_box(const SceneFeatures& scene) { return concat({scene.V, scene.B}, 1); }

}  // namespace lat
