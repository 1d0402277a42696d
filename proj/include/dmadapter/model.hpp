#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dmadapter/backbone.hpp"
#include "dmadapter/dm_adapter.hpp"

namespace dmadapter {

// Frozen dual encoder with a DM-Adapter block beside every MLP sublayer.
class DmAdapterModel {
 public:
  struct Encoded {
    Tensor features;                      // [B, d], unit rows
    std::vector<RoutingOutcome> routing;  // one per hooked layer
  };

  // adapters=false builds the bare backbone (no hooks, no adapter parameters).
  DmAdapterModel(const BackboneConfig& backbone, const MoeConfig& moe, std::uint64_t adapter_seed,
                 bool adapters = true)
      : store_(std::make_unique<ParameterStore>()), moe_(moe), has_adapters_(adapters) {
    backbone_ = std::make_unique<DualEncoder>(backbone, *store_);
    if (!adapters) return;
    std::mt19937_64 rng(adapter_seed);
    for (Branch b : {Branch::vision, Branch::text}) {
      auto& layers = b == Branch::vision ? vision_layers_ : text_layers_;
      for (std::size_t l = 0; l < backbone.n_layers; ++l) {
        const std::string prefix =
            std::string("dm_adapter.") + branch_name(b) + ".layer" + std::to_string(l) + ".";
        layers.push_back(DmAdapterLayer::create(*store_, prefix, backbone.d_model, moe, rng));
      }
    }
  }

  ParameterStore& params() { return *store_; }
  const ParameterStore& params() const { return *store_; }
  const DualEncoder& backbone() const { return *backbone_; }
  const MoeConfig& moe() const { return moe_; }
  bool has_adapters() const { return has_adapters_; }

  const DmAdapterLayer& adapter(Branch b, std::size_t layer) const {
    const auto& layers = b == Branch::vision ? vision_layers_ : text_layers_;
    if (layer >= layers.size()) {
      throw ArgumentError(std::string("no DM-Adapter hook at ") + branch_name(b) + " layer " + std::to_string(layer));
    }
    return layers[layer];
  }
  std::size_t hooked_layers(Branch b) const {
    return (b == Branch::vision ? vision_layers_ : text_layers_).size();
  }

  void freeze_backbone() { backbone_->freeze(); }

  Encoded encode_images(const std::vector<Tensor>& images) const {
    Encoded out;
    auto hooks = make_hooks(Branch::vision, out.routing);
    out.features = backbone_->encode_images(images, hooks.provider());
    return out;
  }

  Encoded encode_texts(const std::vector<std::vector<int>>& captions) const {
    Encoded out;
    auto hooks = make_hooks(Branch::text, out.routing);
    out.features = backbone_->encode_texts(captions, hooks.provider());
    return out;
  }

 private:
  struct HookSet {
    std::vector<MlpHook> hooks;
    HookProvider provider() const {
      if (hooks.empty()) return {};
      return [this](std::size_t l) -> const MlpHook* { return l < hooks.size() ? &hooks[l] : nullptr; };
    }
  };

  HookSet make_hooks(Branch b, std::vector<RoutingOutcome>& sink) const {
    HookSet set;
    const auto& layers = b == Branch::vision ? vision_layers_ : text_layers_;
    const bool normed = moe_.input == AdapterInput::normed;
    for (const auto& layer : layers) {
      set.hooks.push_back([&layer, &sink, normed](const Tensor& x, const Tensor& ln_x, const Tensor& h_o) {
        auto [y, outcome] = layer.forward(normed ? ln_x : x, h_o);
        sink.push_back(std::move(outcome));
        return y;
      });
    }
    return set;
  }

  std::unique_ptr<ParameterStore> store_;
  std::unique_ptr<DualEncoder> backbone_;
  MoeConfig moe_;
  bool has_adapters_;
  std::vector<DmAdapterLayer> vision_layers_;
  std::vector<DmAdapterLayer> text_layers_;
};

}  // namespace dmadapter
