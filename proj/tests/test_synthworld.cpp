#include <cmath>
#include <filesystem>
#include <fstream>

#include "artstvg/binary_io.hpp"
#include "artstvg/synthworld.hpp"
#include "doctest.h"

using namespace artstvg;

namespace {

std::size_t matching_events(const SyntheticEpisode& ep) {
  std::size_t n = 0;
  for (const auto& e : ep.event_script) {
    const bool actor = Vocabulary::actor_token(ep.actor_classes[e.actor_id]) == ep.query_tokens[0];
    const bool action = Vocabulary::action_token(e.action_id) == ep.query_tokens[1];
    if (actor && action) ++n;
  }
  return n;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("artstvg_test_" + name)).string();
}

}  // namespace

TEST_SUITE("synthworld") {

TEST_CASE("generation is deterministic per seed") {
  WorldConfig c;
  const auto a = generate_episode(c, 42);
  const auto b = generate_episode(c, 42);
  REQUIRE(a.length() == b.length());
  for (std::size_t i = 0; i < a.length(); ++i) CHECK(a.frames[i].grid == b.frames[i].grid);
  CHECK(a.gt_segment.start == b.gt_segment.start);
  CHECK(a.gt_segment.end == b.gt_segment.end);
  CHECK(a.event_script == b.event_script);
  const auto other = generate_episode(c, 43);
  CHECK(other.frames[5].grid != a.frames[5].grid);
}

TEST_CASE("single actor, single event spans the GT segment") {
  WorldConfig c;
  c.actors = 1;
  c.events = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ep = generate_episode(c, seed);
    REQUIRE(ep.event_script.size() == 1);
    CHECK(ep.gt_segment.start == ep.event_script[0].start);
    CHECK(ep.gt_segment.end == ep.event_script[0].end);
  }
}

TEST_CASE("exactly one scripted event matches both query words") {
  WorldConfig c;
  c.events = 4;
  c.actors = 3;
  c.frames = 48;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ep = generate_episode(c, seed);
    REQUIRE(ep.query_tokens.size() == 2);
    CHECK(matching_events(ep) == 1);
    for (const auto& e : ep.event_script) {
      const bool actor = Vocabulary::actor_token(ep.actor_classes[e.actor_id]) == ep.query_tokens[0];
      const bool action = Vocabulary::action_token(e.action_id) == ep.query_tokens[1];
      if (actor && action) {
        CHECK(ep.gt_segment.start == e.start);
        CHECK(ep.gt_segment.end == e.end);
      }
    }
  }
}

TEST_CASE("episode invariants hold across seeds") {
  WorldConfig c;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ep = generate_episode(c, seed);
    CHECK(ep.length() == c.frames);
    const Segment s = ep.gt_segment;
    CHECK(0 <= s.start);
    CHECK(s.start <= s.end);
    CHECK(s.end < static_cast<int>(ep.length()));
    REQUIRE(ep.gt_boxes.size() == static_cast<std::size_t>(s.length()));
    for (const auto& b : ep.gt_boxes) {
      CHECK(b.w > 0.0);
      CHECK(b.h > 0.0);
      CHECK(b.x1() >= 0.0);
      CHECK(b.y1() >= 0.0);
      CHECK(b.x2() <= 1.0);
      CHECK(b.y2() <= 1.0);
    }
    for (std::size_t i = 1; i < ep.gt_boxes.size(); ++i) {
      const auto& p = ep.gt_boxes[i - 1];
      const auto& q = ep.gt_boxes[i];
      CHECK(std::abs(q.cx - p.cx) <= c.max_step + 1e-12);
      CHECK(std::abs(q.cy - p.cy) <= c.max_step + 1e-12);
    }
    for (std::size_t i = 1; i < ep.event_script.size(); ++i) {
      CHECK(ep.event_script[i - 1].end < ep.event_script[i].start);
    }
  }
}

TEST_CASE("episode length follows the config") {
  WorldConfig c;
  for (std::size_t frames : {4u, 17u, 200u}) {
    c.frames = frames;
    c.events = 1;
    c.event_min_len = 1;
    c.event_max_len = 3;
    CHECK(generate_episode(c, 5).length() == frames);
  }
}

TEST_CASE("invalid world configs are rejected") {
  WorldConfig c;
  c.events = 0;
  CHECK_THROWS_AS(generate_episode(c, 1), WorldConfigError);
  c = WorldConfig{};
  c.actors = 0;
  CHECK_THROWS_AS(generate_episode(c, 1), WorldConfigError);
  c = WorldConfig{};
  c.frames = 3;
  CHECK_THROWS_AS(generate_episode(c, 1), WorldConfigError);
}

TEST_CASE("motion features") {
  WorldConfig c;
  const auto ep = generate_episode(c, 9);
  const auto f0 = render_frame_features(ep, 0);
  CHECK(f0.appearance == ep.frames[0].grid);
  for (double v : f0.motion) CHECK(v == 0.0);
  const auto f5 = render_frame_features(ep, 5);
  for (std::size_t j = 0; j < f5.motion.size(); ++j) {
    CHECK(f5.motion[j] == ep.frames[5].grid[j] - ep.frames[4].grid[j]);
  }
  CHECK_THROWS_AS(render_frame_features(ep, ep.length()), std::out_of_range);

  // Static scene: two identical frames give zero motion.
  SyntheticEpisode still = ep;
  still.frames[6] = still.frames[5];
  for (double v : render_frame_features(still, 6).motion) CHECK(v == 0.0);
}

TEST_CASE("one object moving one cell changes exactly the vacated and entered cells") {
  const std::size_t gh = 8, gw = 8, ch = 8;
  const std::vector<std::size_t> classes = {0};
  SceneObject obj;
  obj.actor_id = 0;
  obj.box = Box::from_corners(2.0 / 8, 3.0 / 8, 3.0 / 8, 4.0 / 8);  // exactly cell (y=3, x=2)
  std::vector<SceneObject> before = {obj};
  obj.box = Box::from_corners(3.0 / 8, 3.0 / 8, 4.0 / 8, 4.0 / 8);  // cell (y=3, x=3)
  std::vector<SceneObject> after = {obj};
  const auto g0 = render_grid(gh, gw, ch, before, classes);
  const auto g1 = render_grid(gh, gw, ch, after, classes);
  for (std::size_t y = 0; y < gh; ++y) {
    for (std::size_t x = 0; x < gw; ++x) {
      bool changed = false;
      for (std::size_t k = 0; k < ch; ++k) {
        const std::size_t j = (y * gw + x) * ch + k;
        if (std::abs(g1[j] - g0[j]) > 1e-12) changed = true;
      }
      const bool expected = y == 3 && (x == 2 || x == 3);
      CHECK_MESSAGE(changed == expected, "cell " << y << "," << x);
    }
  }
}

TEST_CASE("query encoding") {
  const std::vector<std::size_t> q = {Vocabulary::actor_token(1), Vocabulary::action_token(2)};
  const auto enc = encode_query_tokens(q, 30);
  REQUIRE(enc.tokens.size() == 30);
  CHECK(enc.tokens[0] == q[0]);
  CHECK(enc.tokens[1] == q[1]);
  std::size_t real = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    if (enc.mask[i]) ++real;
    if (i >= 2) {
      CHECK(enc.tokens[i] == Vocabulary::kPad);
      CHECK_FALSE(enc.mask[i]);
    }
  }
  CHECK(real == 2);

  const auto empty = encode_query_tokens(std::vector<std::size_t>{}, 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(empty.tokens[i] == Vocabulary::kPad);
    CHECK_FALSE(empty.mask[i]);
  }

  CHECK_THROWS_AS(encode_query_tokens(std::vector<std::size_t>{Vocabulary::size()}, 8), UnknownTokenError);
  CHECK_THROWS(encode_query_tokens(std::vector<std::size_t>(9, 1), 8));
  CHECK_THROWS_AS(Vocabulary::id("zebra"), UnknownTokenError);
}

TEST_CASE("vocabulary round trip") {
  for (std::size_t id = 1; id < Vocabulary::size(); ++id) {
    const std::string& w = Vocabulary::word(id);
    CHECK(Vocabulary::id(w) == id);
    const std::vector<std::size_t> one = {id};
    const auto enc = encode_query_tokens(one, 4);
    const std::vector<std::size_t> real(enc.tokens.begin(), enc.tokens.begin() + 1);
    CHECK(Vocabulary::decode(real) == std::vector<std::string>{w});
  }
}

TEST_CASE("dataset file round trip and manifest") {
  WorldConfig c;
  std::vector<SyntheticEpisode> eps;
  for (std::uint64_t s = 0; s < 5; ++s) eps.push_back(generate_episode(c, s));
  const std::string path = temp_path("ds.artge");
  write_dataset(path, eps);
  const auto back = read_dataset(path);
  REQUIRE(back.size() == eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    CHECK(back[i].event_script == eps[i].event_script);
    CHECK(back[i].query_tokens == eps[i].query_tokens);
    CHECK(back[i].gt_boxes == eps[i].gt_boxes);
    for (std::size_t f = 0; f < eps[i].length(); ++f) CHECK(back[i].frames[f].grid == eps[i].frames[f].grid);
  }
  const auto third = read_dataset_record(path, 3);
  CHECK(third.event_script == eps[3].event_script);
  CHECK_THROWS(read_dataset_record(path, 7));

  // Identical inputs give byte-identical files.
  const std::string again = temp_path("ds2.artge");
  write_dataset(again, eps);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(slurp(path) == slurp(again));

  // Corruption is detected.
  std::string bytes = slurp(path);
  bytes[0] = 'X';
  {
    std::ofstream f(again, std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_AS(read_dataset(again), FormatError);
  bytes = slurp(path);
  bytes.resize(bytes.size() - 3);
  {
    std::ofstream f(again, std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_AS(read_dataset(again), FormatError);
}

}  // TEST_SUITE
