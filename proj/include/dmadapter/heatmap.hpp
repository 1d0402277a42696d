#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmadapter/checkpoint.hpp"
#include "dmadapter/config.hpp"
#include "dmadapter/model.hpp"
#include "dmadapter/trainer.hpp"

namespace dmadapter {

inline Branch parse_branch(const std::string& s) {
  if (s == "vision" || s == "image") return Branch::vision;
  if (s == "text") return Branch::text;
  throw ArgumentError("unknown branch '" + s + "' (expected vision or text)");
}

// Either a caption (text branch) or an image (vision branch).
struct HeatmapSource {
  std::vector<int> token_ids;
  std::optional<Tensor> image;
};

// Gate weights [T, n] of one hooked layer for a single input; layer defaults to
// the last one.
inline Tensor expert_weights(const DmAdapterModel& model, Branch branch, const HeatmapSource& src,
                             std::optional<std::size_t> layer = {}) {
  const std::size_t layers = model.hooked_layers(branch);
  if (layers == 0) throw ArgumentError(std::string("model has no adapter hooks on the ") + branch_name(branch) + " branch");
  const std::size_t l = layer.value_or(layers - 1);
  model.adapter(branch, l);  // validates the index
  NoGradGuard no_grad;
  DmAdapterModel::Encoded enc;
  if (branch == Branch::vision) {
    if (!src.image) throw ArgumentError("vision heatmap needs an image input");
    enc = model.encode_images({*src.image});
  } else {
    if (src.token_ids.empty()) throw ArgumentError("text heatmap needs token ids");
    enc = model.encode_texts({src.token_ids});
  }
  return enc.routing.at(l).weights;
}

inline std::string heatmap_csv(const Tensor& w) {
  std::ostringstream os;
  os << "token";
  for (std::size_t e = 0; e < w.dim(1); ++e) os << ",expert" << e;
  os << '\n';
  for (std::size_t t = 0; t < w.dim(0); ++t) {
    os << t;
    for (std::size_t e = 0; e < w.dim(1); ++e) os << ',' << detail::fmt_double(w.at(t, e));
    os << '\n';
  }
  return os.str();
}

// Rows are tokens, columns experts; darker cells carry more weight.
inline std::string heatmap_svg(const Tensor& w, const std::string& title) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const int cell = 24, left = 48, top = 40;
  const int width = left + static_cast<int>(cols) * cell + 16;
  const int height = top + static_cast<int>(rows) * cell + 16;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<text x=\"" << left << "\" y=\"14\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t e = 0; e < cols; ++e)
    os << "<text x=\"" << left + static_cast<int>(e) * cell + cell / 2 << "\" y=\"" << top - 6
       << "\" text-anchor=\"middle\">E" << e << "</text>\n";
  for (std::size_t t = 0; t < rows; ++t) {
    const int y = top + static_cast<int>(t) * cell;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">" << t << "</text>\n";
    for (std::size_t e = 0; e < cols; ++e) {
      const double v = std::clamp(w.at(t, e), 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,255)\" stroke=\"#ccc\">"
                    "<title>%.4f</title></rect>\n",
                    left + static_cast<int>(e) * cell, y, cell, cell, shade, shade, w.at(t, e));
      os << buf;
    }
  }
  os << "</svg>\n";
  return os.str();
}

struct HeatmapExport {
  Tensor weights;
  std::size_t layer = 0;
  std::filesystem::path csv_path;
  std::filesystem::path svg_path;
};

// Loads the checkpointed model and writes heatmap_<branch>_layer<l>.{csv,svg}.
inline HeatmapExport export_expert_heatmap(const Checkpoint& ck, const HeatmapSource& src,
                                           std::optional<std::size_t> layer, Branch branch,
                                           const std::filesystem::path& out_dir) {
  ck.config.validate();
  DmAdapterModel model(ck.config.backbone, ck.config.moe, ck.config.seed);
  model.freeze_backbone();
  load_parameters(model, ck);
  HeatmapExport out;
  out.weights = expert_weights(model, branch, src, layer);
  out.layer = layer.value_or(model.hooked_layers(branch) - 1);
  std::filesystem::create_directories(out_dir);
  const std::string stem = std::string("heatmap_") + branch_name(branch) + "_layer" + std::to_string(out.layer);
  out.csv_path = out_dir / (stem + ".csv");
  out.svg_path = out_dir / (stem + ".svg");
  std::ofstream(out.csv_path) << heatmap_csv(out.weights);
  std::ofstream(out.svg_path) << heatmap_svg(out.weights, std::string(branch_name(branch)) + " layer " +
                                                              std::to_string(out.layer) + " expert weights");
  return out;
}

}  // namespace dmadapter
