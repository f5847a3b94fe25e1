// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "helpers.hpp"
#include "mixformer/io.hpp"
#include "mixformer/train.hpp"

using namespace mixformer;
using namespace mixformer::testing;
namespace fs = std::filesystem;

namespace {

Image checkerboard(std::size_t w, std::size_t h) {
  Image img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>((x * 7 + y * 13 + c * 50) % 256);
  return img;
}

SyntheticConfig small_scene(double motion = 0.0) {
  SyntheticConfig c;
  c.width = 96;
  c.height = 96;
  c.frames = 7;
  c.object_w = 18;
  c.object_h = 14;
  c.motion = motion;
  return c;
}

// Sets the score predictor's output to a constant logit.
void force_score(const Model<float>& model, float logit) {
  for (auto p : model.spm_parameters()) {  // copies alias the model storage
    if (p.name == "spm.mlp.fc3.weight") for (float& v : p.tensor.mutable_data()) v = 0.0f;
    if (p.name == "spm.mlp.fc3.bias") for (float& v : p.tensor.mutable_data()) v = logit;
  }
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mixformer_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("tracker") {
  TEST_CASE("crop side arithmetic") {
    CHECK(crop_side(PixelBox{0, 0, 40, 40}, 2.0) == 80.0);
    CHECK(crop_side(PixelBox{0, 0, 64, 64}, 5.0) == 320.0);
    CHECK(crop_side(PixelBox{0, 0, 20, 80}, 2.0) == 80.0);
    CHECK(crop_side(PixelBox{5, 5, 0, 0}, 5.0, 16.0) == 16.0);
  }

  TEST_CASE("centred crop keeps the box centre") {
    const Image frame = checkerboard(200, 150);
    const PixelBox box{80, 50, 40, 30};
    const Patch p = crop_square(frame, box.center_x(), box.center_y(), crop_side(box, 2.0), 32, 32);
    const auto c = p.transform.normalized_to_frame(0.5, 0.5);
    CHECK(c[0] == doctest::Approx(box.center_x()).epsilon(1e-12));
    CHECK(c[1] == doctest::Approx(box.center_y()).epsilon(1e-12));
    const BoundingBox n = p.transform.normalize(box);
    CHECK(n.center_x() == doctest::Approx(0.5));
    CHECK(n.center_y() == doctest::Approx(0.5));
  }

  TEST_CASE("unit-scale crop copies pixels exactly") {
    // Side 320 onto 320x320 with an integer origin: every sample lands on a pixel centre.
    const Image frame = checkerboard(400, 360);
    const PixelBox box{168, 148, 64, 64};
    const Patch p = crop_square(frame, box.center_x(), box.center_y(), crop_side(box, 5.0), 320, 320);
    CHECK(p.transform.origin_x == 40.0);
    CHECK(p.transform.origin_y == 20.0);
    bool same = true;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 320; ++v)
        for (std::size_t u = 0; u < 320; ++u)
          same = same && p.pixels[(c * 320 + v) * 320 + u] == float(frame.at(40 + u, 20 + v, c));
    CHECK(same);
  }

  TEST_CASE("crops past the frame edge are mean padded") {
    const Image frame = checkerboard(60, 40);
    const auto mean = frame.channel_mean();
    const Patch p = crop_square(frame, 0.0, 0.0, 40.0, 16, 16);
    CHECK(p.width == 16);
    CHECK(p.height == 16);
    CHECK(p.pixels.size() == 3 * 16 * 16);
    for (std::size_t c = 0; c < 3; ++c) {
      // The top-left quadrant lies entirely outside the frame.
      for (std::size_t v = 0; v < 7; ++v)
        for (std::size_t u = 0; u < 7; ++u) CHECK(p.pixels[(c * 16 + v) * 16 + u] == doctest::Approx(mean[c]).epsilon(1e-6));
    }
  }

  TEST_CASE("frame to patch mapping round trips") {
    Rng rng(51);
    for (int i = 0; i < 100; ++i) {
      const CropTransform t{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(10, 300), 64, 64};
      const double fx = rng.uniform(0, 200), fy = rng.uniform(0, 200);
      const auto n = t.frame_to_normalized(fx, fy);
      const auto back = t.normalized_to_frame(n[0], n[1]);
      CHECK(std::abs(back[0] - fx) < 0.5);
      CHECK(std::abs(back[1] - fy) < 0.5);
      CHECK(std::abs(back[0] - fx) < 1e-9);
      const PixelBox b{fx, fy, rng.uniform(1, 50), rng.uniform(1, 50)};
      const PixelBox rb = t.to_frame(t.normalize(b));
      CHECK(std::abs(rb.x - b.x) < 1e-9);
      CHECK(std::abs(rb.h - b.h) < 1e-9);
    }
  }

  TEST_CASE("updater mutates only at interval boundaries") {
    TemplateUpdater u(200, 0.5, 1);
    std::vector<std::size_t> mutated;
    for (std::size_t f = 1; f <= 1000; ++f) {
      if (u.observe(f, 0.9).slot) mutated.push_back(f);
    }
    CHECK(mutated == std::vector<std::size_t>{200, 400, 600, 800, 1000});

    TemplateUpdater low(200, 0.5, 1);
    for (std::size_t f = 1; f <= 1000; ++f) CHECK_FALSE(low.observe(f, 0.49).slot);
    CHECK(low.mutations() == 0);
  }

  TEST_CASE("updater installs the interval argmax and breaks ties early") {
    TemplateUpdater u(3, 0.5, 1);
    u.observe(1, 0.3);
    u.observe(2, 0.9);
    const auto d = u.observe(3, 0.7);
    CHECK(d.boundary);
    REQUIRE(d.slot);
    CHECK(d.best_frame == 2);
    CHECK(d.best_score == 0.9);

    TemplateUpdater tie(2, 0.5, 1);
    CHECK(tie.observe(1, 0.8).new_best);
    const auto t = tie.observe(2, 0.8);
    CHECK_FALSE(t.new_best);
    CHECK(t.best_frame == 1);

    // Threshold is inclusive; the counter resets after each boundary.
    TemplateUpdater edge(1, 0.5, 1);
    CHECK(edge.observe(1, 0.5).slot);
    CHECK(edge.counter() == 0);
  }

  TEST_CASE("updater replaces the oldest slot") {
    TemplateUpdater u(1, 0.5, 3);
    std::vector<std::size_t> slots;
    for (std::size_t f = 1; f <= 7; ++f) slots.push_back(*u.observe(f, 0.6).slot);
    CHECK(slots == std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0});
  }

  TEST_CASE("mutation count never exceeds frames over interval") {
    Rng rng(52);
    for (std::size_t interval : {1u, 3u, 7u, 200u}) {
      TemplateUpdater u(interval, 0.5, 2);
      const std::size_t frames = 500;
      for (std::size_t f = 1; f <= frames; ++f) u.observe(f, rng.uniform());
      CHECK(u.mutations() <= frames / interval);
    }
  }

  TEST_CASE("online slots follow the score gate; the first template never changes") {
    const Model<float> model(ModelConfig::make(Preset::Tiny), 3);
    const Sequence seq = generate_synthetic(small_scene(1.0), 4);
    TrackerConfig cfg;
    cfg.update_interval = 2;

    force_score(model, 10.0f);
    Tracker tracker(model, cfg);
    tracker.init(seq.frames[0], seq.boxes[0]);
    const Patch first = tracker.first_template();
    const Patch seeded = tracker.online_templates()[0];
    CHECK(seeded == first);
    const TrackResult r1 = tracker.step(seq.frames[1]);
    CHECK(tracker.online_templates()[0] == seeded);
    CHECK(r1.score > 0.99);
    tracker.step(seq.frames[2]);
    // Equal scores: frame 1 is the earliest best of the interval.
    CHECK(tracker.online_templates()[0] == tracker.crop_template(seq.frames[1], r1.box));
    CHECK(tracker.updater().mutations() == 1);
    for (std::size_t f = 3; f < seq.frames.size(); ++f) tracker.step(seq.frames[f]);
    CHECK(tracker.first_template() == first);

    force_score(model, -10.0f);
    Tracker gated(model, cfg);
    gated.init(seq.frames[0], seq.boxes[0]);
    for (std::size_t f = 1; f < seq.frames.size(); ++f) gated.step(seq.frames[f]);
    CHECK(gated.online_templates()[0] == seeded);
    CHECK(gated.updater().mutations() == 0);

    force_score(model, 10.0f);
    Tracker patient(model, TrackerConfig{});
    patient.init(seq.frames[0], seq.boxes[0]);
    for (std::size_t f = 1; f < seq.frames.size(); ++f) patient.step(seq.frames[f]);
    CHECK(patient.online_templates()[0] == seeded);
  }

  TEST_CASE("replaying a sequence reproduces every byte") {
    const Model<float> model(ModelConfig::make(Preset::Tiny), 5);
    const Sequence seq = generate_synthetic(small_scene(2.0), 6);
    TrackerConfig cfg;
    cfg.update_interval = 3;
    const std::string a = track_csv(track_sequence(model, cfg, seq));
    const std::string b = track_csv(track_sequence(model, cfg, seq));
    CHECK(a == b);
    CHECK(std::count(a.begin(), a.end(), '\n') == 8);

    // Identical frames fed to two trackers give identical boxes.
    Tracker t1(model, cfg), t2(model, cfg);
    t1.init(seq.frames[0], seq.boxes[0]);
    t2.init(seq.frames[0], seq.boxes[0]);
    const TrackResult r1 = t1.step(seq.frames[1]), r2 = t2.step(seq.frames[1]);
    CHECK(r1.box == r2.box);
    CHECK(r1.score == r2.score);
  }

  TEST_CASE("template caching leaves results unchanged") {
    const Model<float> model(ModelConfig::make(Preset::Tiny, HeadType::Corner, AttentionMode::Asymmetric), 7);
    const Sequence seq = generate_synthetic(small_scene(1.5), 8);
    TrackerConfig plain;
    plain.update_interval = 2;
    TrackerConfig cached = plain;
    cached.cache_templates = true;
    CHECK(track_csv(track_sequence(model, plain, seq)) == track_csv(track_sequence(model, cached, seq)));
  }

  TEST_CASE("misconfiguration is rejected") {
    const Model<float> model(ModelConfig::make(Preset::Tiny), 1);
    TrackerConfig two;
    two.online_templates = 2;
    CHECK_THROWS_AS(Tracker(model, two), ConfigError);
    TrackerConfig cache;
    cache.cache_templates = true;
    CHECK_THROWS_AS(Tracker(model, cache), ConfigError);
    TrackerConfig bad;
    bad.search_factor = 1.0;
    CHECK_THROWS_AS(Tracker(model, bad), ConfigError);

    Tracker t(model, TrackerConfig{});
    const Image frame = checkerboard(64, 64);
    CHECK_THROWS_AS(t.step(frame), UsageError);
    CHECK_THROWS_AS(t.init(frame, PixelBox{10, 10, 0, 5}), ConfigError);
    CHECK_THROWS_AS(t.init(frame, PixelBox{100, 100, 5, 5}), ConfigError);
    t.init(frame, PixelBox{10, 10, 20, 20});
    CHECK_THROWS_AS(t.step(checkerboard(32, 64)), ConfigError);
  }

  TEST_CASE("box file round trip and errors") {
    const std::vector<TrackResult> r{{{1.5, 2.25, 30, 40.125}, 1.0}, {{0.1, 0.2, 0.3, 0.4}, 0.123456789}};
    const std::string csv = track_csv(r);
    CHECK(csv.rfind("frame,x,y,w,h,score\n1,1.5,2.25,30,40.125,1\n", 0) == 0);
    const auto back = parse_track_csv(csv);
    REQUIRE(back.size() == 2);
    CHECK(back[1].box == r[1].box);
    CHECK(back[1].score == r[1].score);
    CHECK_THROWS_AS(parse_track_csv("x,y\n"), IoError);
    CHECK_THROWS_AS(parse_track_csv("frame,x,y,w,h,score\n2,0,0,1,1,0.5\n"), IoError);
    CHECK_THROWS_AS(parse_track_csv("frame,x,y,w,h,score\n1,0,0,1,1,abc\n"), IoError);
  }
}

TEST_SUITE("data") {
  TEST_CASE("generation is deterministic per seed") {
    SyntheticConfig c = small_scene(2.0);
    c.scale_jitter = 0.05;
    c.brightness_jitter = 0.1;
    c.distractors = 2;
    const Sequence a = generate_synthetic(c, 11), b = generate_synthetic(c, 11), other = generate_synthetic(c, 12);
    CHECK(a.frames == b.frames);
    CHECK(a.boxes == b.boxes);
    CHECK(a.frames != other.frames);
  }

  TEST_CASE("zero motion keeps the ground truth constant and inside the frame") {
    const Sequence s = generate_synthetic(small_scene(0.0), 13);
    for (const auto& b : s.boxes) CHECK(b == s.boxes[0]);
    SyntheticConfig c = small_scene(30.0);
    c.scale_jitter = 0.3;
    const Sequence m = generate_synthetic(c, 14);
    for (const auto& b : m.boxes) {
      CHECK(b.x >= 0.0);
      CHECK(b.y >= 0.0);
      CHECK(b.x1() <= 96.0);
      CHECK(b.y1() <= 96.0);
    }
  }

  TEST_CASE("distractors never cover the target") {
    SyntheticConfig c = small_scene(0.0);
    c.object_w = c.object_h = 20.0;
    c.noise = 0.0;
    SyntheticConfig busy = c;
    busy.distractors = 12;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const Sequence a = generate_synthetic(c, seed), b = generate_synthetic(busy, seed);
      // The object texture is drawn first, so both scenes share it; sample
      // the pixel at the centre of each 5x5 texture cell.
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
          const auto pick = [&](const Sequence& s, std::size_t ch) {
            const PixelBox& box = s.boxes[0];
            return s.frames[0].at(std::size_t(box.x + 5.0 * double(j) + 2.5), std::size_t(box.y + 5.0 * double(i) + 2.5), ch);
          };
          for (std::size_t ch = 0; ch < 3; ++ch) CHECK(pick(a, ch) == pick(b, ch));
        }
      }
    }
  }

  TEST_CASE("synthetic configuration is validated") {
    SyntheticConfig c = small_scene();
    c.object_w = 200;
    CHECK_THROWS_AS(generate_synthetic(c, 1), ConfigError);
    c = small_scene();
    c.motion = -1;
    CHECK_THROWS_AS(generate_synthetic(c, 1), ConfigError);
  }

  TEST_CASE("ground-truth lines parse to corner boxes") {
    const PixelBox b = parse_box_line("10.5,20.0,30.0,40.0", 1);
    CHECK(b.x == 10.5);
    CHECK(b.y == 20.0);
    CHECK(b.x1() == 40.5);
    CHECK(b.y1() == 60.0);
    CHECK(parse_groundtruth("1,2,3,4\r\n\n5, 6, 7, 8\n").size() == 2);
    CHECK_THROWS_WITH_AS(parse_groundtruth("1,2,3,4\n1,2,x,4\n"), doctest::Contains("line 2"), IoError);
    CHECK_THROWS_AS(parse_box_line("1,2,3", 1), IoError);
    CHECK_THROWS_AS(parse_box_line("1,2,3,4,5", 1), IoError);
    CHECK(format_box(b) == "10.5,20,30,40");
  }

  TEST_CASE("sequences round trip through disk") {
    const fs::path dir = scratch_dir("roundtrip");
    SyntheticConfig c = small_scene(2.0);
    c.frames = 3;
    Sequence s = generate_synthetic(c, 15);
    s.boxes[1].x += 0.1;  // non-representable decimals must survive too
    save_sequence(s, dir);
    const Sequence back = load_sequence(dir);
    CHECK(back.frames == s.frames);
    CHECK(back.boxes == s.boxes);
    fs::remove_all(dir);
  }

  TEST_CASE("missing frames and count mismatches are reported") {
    const fs::path dir = scratch_dir("missing");
    SyntheticConfig c = small_scene();
    c.frames = 4;
    save_sequence(generate_synthetic(c, 16), dir);
    fs::remove(dir / frame_file_name(2));
    CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("00000002"), IoError);
    write_file_atomic(dir / frame_file_name(2), read_text_file(dir / frame_file_name(1)));
    CHECK_NOTHROW(load_sequence(dir));
    write_file_atomic(dir / "groundtruth.txt", std::string("1,1,5,5\n2,2,5,5\n"));
    CHECK_THROWS_AS(load_sequence(dir), std::exception);
    // A single line is an initial box only.
    write_file_atomic(dir / "groundtruth.txt", std::string("1,1,5,5\n"));
    CHECK(load_sequence(dir).boxes.size() == 1);
    CHECK_THROWS_AS(load_sequence(dir / "nope"), IoError);
    fs::remove_all(dir);
  }

  TEST_CASE("success AUC and precision by direct counting") {
    const std::vector<PixelBox> gt{{0, 0, 10, 10}, {10, 10, 10, 10}, {0, 0, 4, 4}, {50, 50, 8, 8}};
    // Perfect: IoU 1 beats every threshold except t = 1.
    CHECK(success_auc(gt, gt) == doctest::Approx(100.0 / 101.0));
    CHECK(precision(gt, gt) == 1.0);
    std::vector<PixelBox> far;
    for (const auto& b : gt) far.push_back({b.x + 500, b.y + 500, b.w, b.h});
    CHECK(success_auc(far, gt) == 0.0);
    CHECK(precision(far, gt) == 0.0);
    const std::vector<PixelBox> half{gt[0], gt[1], far[2], far[3]};
    CHECK(success_auc(half, gt) == doctest::Approx(50.0 / 101.0));
    CHECK(std::abs(success_auc(half, gt) - 0.5) < 0.01);
    CHECK(precision(half, gt) == 0.5);
    // Centre error exactly at the threshold counts.
    CHECK(precision({{20, 0, 10, 10}}, {{0, 0, 10, 10}}) == 1.0);
    CHECK(precision({{20.01, 0, 10, 10}}, {{0, 0, 10, 10}}) == 0.0);
    CHECK_THROWS(success_auc(half, {gt[0]}));
  }

  TEST_CASE("metrics are monotone and permutation covariant") {
    Rng rng(17);
    std::vector<PixelBox> gt, pred;
    for (int i = 0; i < 30; ++i) {
      gt.push_back({rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(5, 20), rng.uniform(5, 20)});
      pred.push_back({gt.back().x + rng.uniform(-8, 8), gt.back().y + rng.uniform(-8, 8), gt.back().w, gt.back().h});
    }
    const double base = success_auc(pred, gt);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      std::vector<PixelBox> better = pred;
      better[i] = gt[i];
      CHECK(success_auc(better, gt) >= base);
    }
    std::vector<std::size_t> order(gt.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = (i * 7) % order.size();
    std::vector<PixelBox> pg, pp;
    for (std::size_t i : order) {
      pg.push_back(gt[i]);
      pp.push_back(pred[i]);
    }
    CHECK(success_auc(pp, pg) == doctest::Approx(base).epsilon(1e-15));
    CHECK(precision(pp, pg) == precision(pred, gt));
    CHECK(mean_iou(pp, pg) == doctest::Approx(mean_iou(pred, gt)).epsilon(1e-15));
  }

  TEST_CASE("PPM encoding round trips") {
    const fs::path dir = scratch_dir("ppm");
    const Image img = checkerboard(7, 5);
    const auto bytes = encode_ppm(img);
    write_file_atomic(dir / "a.ppm", std::string(bytes.begin(), bytes.end()));
    CHECK(read_ppm(dir / "a.ppm") == img);
    write_file_atomic(dir / "b.ppm", std::string("P6\n7 5\n255\nabc"));
    CHECK_THROWS_AS(read_ppm(dir / "b.ppm"), IoError);
    fs::remove_all(dir);
  }
}
