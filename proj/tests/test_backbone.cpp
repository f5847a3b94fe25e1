// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "helpers.hpp"
#include "mixformer/cost.hpp"
#include "mixformer/model.hpp"

using namespace mixformer;
using namespace mixformer::testing;

namespace {

template <typename T>
std::vector<Tensor<T>> random_templates(const BackboneConfig& c, Rng& rng) {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < c.templates; ++i) out.push_back(random_tensor<T>({3, c.template_h, c.template_w}, rng));
  return out;
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("preset tables") {
    const BackboneConfig m = BackboneConfig::preset(Preset::MixFormer);
    CHECK(m.stages[0].embed_dim == 64);
    CHECK(m.stages[1].embed_dim == 192);
    CHECK(m.stages[2].embed_dim == 384);
    CHECK(m.stages[0].blocks == 1);
    CHECK(m.stages[1].blocks == 4);
    CHECK(m.stages[2].blocks == 16);
    CHECK(m.stages[2].heads == 6);
    CHECK(m.stages[0].embed_kernel == 7);
    CHECK(m.stages[0].embed_stride == 4);
    CHECK(m.stages[1].embed_kernel == 3);
    CHECK(m.stages[2].embed_stride == 2);

    const BackboneConfig l = BackboneConfig::preset(Preset::MixFormerL);
    CHECK(l.stages[0].embed_dim == 192);
    CHECK(l.stages[1].embed_dim == 768);
    CHECK(l.stages[2].embed_dim == 1024);
    CHECK(l.stages[0].blocks == 2);
    CHECK(l.stages[1].blocks == 2);
    CHECK(l.stages[2].blocks == 12);
    CHECK(l.stages[2].heads == 16);

    const BackboneConfig t = BackboneConfig::preset(Preset::Tiny);
    CHECK(t.template_h == 32);
    CHECK(t.search_h == 64);
    CHECK(t.final_dim() == 64);
    CHECK(parse_preset("mixformer_l") == Preset::MixFormerL);
    CHECK_THROWS_AS(parse_preset("huge"), ConfigError);
  }

  TEST_CASE("patch embedding extents") {
    const BackboneConfig m = BackboneConfig::preset(Preset::MixFormer);
    CHECK(m.stage_template_h(0) == 32);
    CHECK(m.stage_search_h(0) == 80);
    CHECK(m.stage_search_h(2) == 20);
    const BackboneConfig t = BackboneConfig::preset(Preset::Tiny);
    CHECK(t.stage_search_h(0) == 16);
    CHECK(t.stage_search_w(2) == 4);
  }

  TEST_CASE("token lengths per stage") {
    const BackboneConfig m2 = BackboneConfig::preset(Preset::MixFormer, 2);
    CHECK(m2.layout(0).total_tokens() == 8448);
    CHECK(m2.layout(1).total_tokens() == 2112);
    CHECK(m2.layout(2).total_tokens() == 528);
    const BackboneConfig m1 = BackboneConfig::preset(Preset::MixFormer, 1);
    CHECK(m1.layout(2).total_tokens() == 464);
    // Identity T*(H_t/4/2^(i-1))^2 + (H_s/4/2^(i-1))^2 for every preset.
    for (Preset p : {Preset::MixFormer, Preset::MixFormerL, Preset::Tiny}) {
      for (std::size_t t : {1u, 2u, 3u}) {
        const BackboneConfig c = BackboneConfig::preset(p, t);
        for (std::size_t s = 0; s < kStageCount; ++s) {
          const std::size_t div = 4u << s;
          const std::size_t expect = t * (c.template_h / div) * (c.template_w / div) + (c.search_h / div) * (c.search_w / div);
          CHECK(c.layout(s).total_tokens() == expect);
        }
      }
    }
  }

  TEST_CASE("config validation") {
    BackboneConfig c = BackboneConfig::preset(Preset::Tiny);
    c.search_h = 72;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = BackboneConfig::preset(Preset::Tiny);
    c.stages[1].heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = BackboneConfig::preset(Preset::Tiny);
    c.stages[0].embed_kernel = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = BackboneConfig::preset(Preset::Tiny);
    c.templates = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("TINY forward shapes and determinism") {
    Rng rng(1);
    for (auto mode : {AttentionMode::Full, AttentionMode::Asymmetric}) {
      const BackboneConfig c = BackboneConfig::preset(Preset::Tiny, 2, mode);
      Rng init(5);
      const Backbone<float> bb(c, init);
      const auto templates = random_templates<float>(c, rng);
      const TensorF search = random_tensor<float>({3, 64, 64}, rng);
      const BackboneOutput<float> out = bb.forward(templates, search);
      CHECK(out.search_feat.shape() == Shape{64, 4, 4});
      CHECK(out.stage_lengths == std::array<std::size_t, 3>{384, 96, 24});
      CHECK(out.template_tokens.shape() == Shape{8, 64});
      const BackboneOutput<float> again = bb.forward(templates, search);
      CHECK(bit_equal(out.search_feat, again.search_feat));

      CHECK_THROWS_AS(bb.forward({templates[0]}, search), ConfigError);
      CHECK_THROWS_AS(bb.forward(templates, random_tensor<float>({3, 32, 32}, rng)), ConfigError);
    }
  }

  TEST_CASE("template cache reproduces the forward pass") {
    Rng rng(2);
    const BackboneConfig c = BackboneConfig::preset(Preset::Tiny, 2, AttentionMode::Asymmetric);
    const Backbone<float> bb(c, rng);
    const auto templates = random_templates<float>(c, rng);
    const TemplateCache<float> cache = bb.encode_templates(templates);
    for (int frame = 0; frame < 3; ++frame) {
      const TensorF search = random_tensor<float>({3, 64, 64}, rng);
      CHECK(bit_equal(bb.forward(templates, search).search_feat, bb.forward_cached(cache, search).search_feat));
    }
    const TemplateCache<float> again = bb.encode_templates(templates);
    CHECK(bit_equal(cache.final_tokens, again.final_tokens));
    const Backbone<float> full(BackboneConfig::preset(Preset::Tiny), rng);
    CHECK_THROWS_AS(full.encode_templates(templates), UsageError);
  }

  TEST_CASE("every backbone parameter receives gradient") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      const BackboneConfig c = BackboneConfig::preset(Preset::Tiny);
      const Backbone<double> bb(c, rng);
      const auto templates = random_templates<double>(c, rng);
      const TensorD search = random_tensor<double>({3, 64, 64}, rng);
      const TensorD w = random_tensor<double>({64, 4, 4}, rng);
      sum(mul(bb.forward(templates, search).search_feat, w)).backward();
      ParamList<double> params;
      bb.collect(params, "backbone");
      for (const auto& p : params) {
        if (!p.trainable) continue;
        const auto g = p.tensor.grad();
        const bool nonzero = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
        CHECK_MESSAGE(nonzero, p.name);
      }
    }
  }

  TEST_CASE("checkpoint names are hierarchical") {
    Rng rng(3);
    const Backbone<float> bb(BackboneConfig::preset(Preset::Tiny), rng);
    ParamList<float> params;
    bb.collect(params, "backbone");
    std::vector<std::string> names;
    for (const auto& p : params) names.push_back(p.name);
    auto has = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
    CHECK(has("backbone.stage1.embed.conv.weight"));
    CHECK(has("backbone.stage3.block2.attn.wq.weight"));
    CHECK(has("backbone.stage3.block2.attn.conv_k"));
    CHECK(has("backbone.stage2.block1.mlp.fc1.weight"));
    CHECK(has("backbone.final_norm.gain"));
  }
}

TEST_SUITE("cost") {
  TEST_CASE("one block matches the hand-computed spreadsheet") {
    // dim 16, R 4: 2 layer norms (2*32) + 3 depthwise 3x3 kernels (3*144)
    // + 4 linear D->D with bias (4*272) + fc1 16->64 (1088) + fc2 64->16 (1040).
    CHECK(block_params(16, 4.0) == 3712);
    Rng rng(1);
    const MamBlock<float> block(16, 1, 4.0, AttentionMode::Full, rng);
    ParamList<float> p;
    block.collect(p, "b");
    CHECK(count_elements(p) == 3712);

    // TINY stage-1 layout, T=2: 384 queries, 96 keys (32 template + 64 search).
    // depthwise 9*16*(384+192) = 82944; projections 256*(768+192) = 245760;
    // q k^T and attn*v 2*384*96*16 = 1179648; MLP 2*384*16*64 = 786432.
    const BackboneConfig tiny = BackboneConfig::preset(Preset::Tiny);
    CHECK(block_macs(tiny.layout(0), 4.0, AttentionMode::Full) == 2294784);
    // Asymmetric: template rows see 32 keys: 2*16*(128*32 + 256*96) = 917504.
    CHECK(block_macs(tiny.layout(0), 4.0, AttentionMode::Asymmetric) == 2032640);
  }

  TEST_CASE("TINY parameter totals equal the instantiated model") {
    for (HeadType head : {HeadType::Corner, HeadType::Query}) {
      const ModelConfig mc = ModelConfig::make(Preset::Tiny, head);
      const Model<float> model(mc, 1);
      const CostReport r = count_params_flops(mc);
      CHECK(r.total_params() == count_elements(model.localization_parameters()));
      CHECK(r.score_predictor.params == count_elements(model.spm_parameters()));
    }
  }

  TEST_CASE("MIXFORMER FLOPs within 20 percent of 23.04G") {
    const CostReport r = count_params_flops(ModelConfig::make(Preset::MixFormer));
    const double g = double(r.total_macs()) / 1e9;
    CHECK(g > 23.04 * 0.8);
    CHECK(g < 23.04 * 1.2);
    CHECK(r.stages.size() == 3);
    CHECK(r.table().find("stage3") != std::string::npos);
  }

  TEST_CASE("more blocks strictly increase FLOPs") {
    ModelConfig mc = ModelConfig::make(Preset::MixFormer);
    const auto before = count_params_flops(mc).total_macs();
    mc.backbone.stages[2].blocks *= 2;
    CHECK(count_params_flops(mc).total_macs() > before);
  }
}
