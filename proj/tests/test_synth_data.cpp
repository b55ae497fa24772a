#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "evcmf/evcmf.hpp"

using namespace evcmf;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("evcmf_synth_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Mean (x, y) of non-background pixels in frame t.
std::pair<double, double> centroid(const VideoClip& c, std::size_t t) {
  double sx = 0, sy = 0, n = 0;
  for (std::size_t y = 0; y < c.height; ++y)
    for (std::size_t x = 0; x < c.width; ++x)
      if (c.at(t, y, x, 0) != kBackgroundLevel || c.at(t, y, x, 1) != kBackgroundLevel) {
        sx += static_cast<double>(x);
        sy += static_cast<double>(y);
        n += 1;
      }
  return {sx / n, sy / n};
}

}  // namespace

TEST(Generate, DeterministicPerSeedAndIndex) {
  SynthSettings settings;
  auto a = generate_clip(settings, 3), b = generate_clip(settings, 3), c = generate_clip(settings, 4);
  EXPECT_EQ(a.clip.pixels, b.clip.pixels);
  EXPECT_EQ(a.captions, b.captions);
  EXPECT_NE(a.clip.pixels, c.clip.pixels);
  settings.seed = 8;
  EXPECT_NE(generate_clip(settings, 3).clip.pixels, a.clip.pixels);
}

TEST(Generate, CaptionsFollowGrammarAndClipIsValid) {
  SynthSettings settings;
  std::set<std::string> canonical;
  for (std::size_t i = 0; i < 80; ++i) {
    auto s = generate_clip(settings, i);
    EXPECT_NO_THROW(s.clip.validate());
    EXPECT_EQ(s.clip.pixel_count(), 8u * 64 * 64 * 3);
    ASSERT_GE(s.captions.size(), 1u);
    ASSERT_LE(s.captions.size(), 3u);
    for (const auto& cap : s.captions) EXPECT_TRUE(caption_matches_template(cap)) << cap;
    EXPECT_EQ(s.captions[0], "a " + s.color + " " + s.shape + " moves " + s.motion);
    if (i < 48) canonical.insert(s.captions[0]);
  }
  EXPECT_EQ(canonical.size(), 48u);
  EXPECT_FALSE(caption_matches_template("a purple square moves right"));
  EXPECT_FALSE(caption_matches_template("a red square moves"));
}

TEST(Generate, TranslationConsistentMotion) {
  SynthSettings settings;
  for (std::size_t i = 0; i < 40; ++i) {
    auto s = generate_clip(settings, i);
    for (std::size_t t = 0; t + 1 < settings.frames; ++t) {
      auto [x0, y0] = centroid(s.clip, t);
      auto [x1, y1] = centroid(s.clip, t + 1);
      EXPECT_NEAR(x1 - x0, s.step_x, 1e-9) << i << " t=" << t;
      EXPECT_NEAR(y1 - y0, s.step_y, 1e-9) << i << " t=" << t;
    }
    EXPECT_TRUE((s.step_x == 0) != (s.step_y == 0));
  }
}

TEST(Generate, CanvasTooSmall) {
  SynthSettings settings;
  settings.height = settings.width = 16;
  EXPECT_THROW(generate_clip(settings, 0), ConfigError);
}

TEST(Vocab, ReservedIdsAndRoundTrip) {
  auto v = build_vocab({"a red square moves right", "the red circle moves up", "a red square is moving left"});
  const std::vector<std::string> reserved{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]"};
  for (int i = 0; i < kReservedCount; ++i) EXPECT_EQ(v.token(i), reserved[static_cast<std::size_t>(i)]);
  EXPECT_EQ(v.token(6), "red");  // most frequent
  EXPECT_EQ(v.id("unseen"), kUnkId);
  auto ids = v.encode("a red circle is moving up");
  EXPECT_EQ(v.encode(v.decode(ids)), ids);
  EXPECT_EQ(v.decode(v.encode_caption("the red square moves left")), "the red square moves left");
  EXPECT_EQ(Vocabulary::from_tokens(v.tokens()).tokens(), v.tokens());
  EXPECT_THROW(build_vocab({}), InputError);
}

TEST(Vocab, OrderingFrequencyThenLexicographic) {
  auto v = build_vocab({"b a", "c a", "b d"});
  EXPECT_EQ(std::vector<std::string>(v.tokens().begin() + kReservedCount, v.tokens().end()),
            (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(ClipFile, RoundTripAndErrors) {
  const auto dir = fresh_dir("clipfile");
  auto s = generate_clip(SynthSettings{}, 1);
  write_clip(dir / "c.evcf", s.clip);
  auto back = read_clip(dir / "c.evcf");
  EXPECT_EQ(back.pixels, s.clip.pixels);
  EXPECT_EQ(back.frames, 8u);
  const auto bytes = slurp(dir / "c.evcf");
  EXPECT_EQ(bytes.substr(0, 4), "EVCF");
  EXPECT_EQ(bytes.size(), 20u + 8 * 64 * 64 * 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 8);  // little-endian T

  auto corrupt = bytes;
  corrupt[0] = 'X';
  std::ofstream(dir / "bad.evcf", std::ios::binary) << corrupt;
  EXPECT_THROW(read_clip(dir / "bad.evcf"), FormatError);

  std::ofstream(dir / "short.evcf", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  try {
    read_clip(dir / "short.evcf");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload at offset"), std::string::npos);
  }

  auto huge = bytes.substr(0, 20);
  for (int k = 4; k < 16; ++k) huge[static_cast<std::size_t>(k)] = static_cast<char>(0xff);
  std::ofstream(dir / "huge.evcf", std::ios::binary) << huge;
  EXPECT_THROW(read_clip(dir / "huge.evcf"), FormatError);
  EXPECT_THROW(read_clip(dir / "absent.evcf"), InputError);
}

TEST(Manifest, RoundTripAndValidation) {
  const auto dir = fresh_dir("manifest");
  write_clip(dir / "a.evcf", generate_clip(SynthSettings{}, 0).clip);
  std::vector<ManifestEntry> entries{{"a", "a.evcf", {"x y"}, "train"}, {"b", "a.evcf", {"z"}, "test"}};
  write_manifest(dir / "m.jsonl", entries);
  auto back = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].video_id, "b");
  EXPECT_EQ(back[1].captions, std::vector<std::string>{"z"});
  EXPECT_EQ(resolve_clip_path(dir / "m.jsonl", back[0]), dir / "a.evcf");

  auto expect_error = [&](std::vector<ManifestEntry> es, const std::string& needle) {
    write_manifest(dir / "bad.jsonl", es);
    try {
      load_manifest(dir / "bad.jsonl");
      FAIL() << needle;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error({{"a", "a.evcf", {"x"}, "dev"}}, ":1: unknown split");
  expect_error({{"a", "a.evcf", {"x"}, "train"}, {"a", "a.evcf", {"x"}, "val"}}, ":2: duplicate video_id");
  expect_error({{"a", "missing.evcf", {"x"}, "train"}}, "missing clip file");
  std::ofstream(dir / "junk.jsonl") << "{\"video_id\": \"a\"}\nnot json\n";
  EXPECT_THROW(load_manifest(dir / "junk.jsonl"), FormatError);
}

TEST(Corpus, SplitsAndVocabularyCoverage) {
  const auto dir = fresh_dir("corpus");
  auto stats = write_synthetic_corpus(dir, SynthSettings{}, 80);
  EXPECT_EQ(stats.clips, 80u);
  EXPECT_EQ(stats.train, 64u);
  EXPECT_EQ(stats.val, 8u);
  EXPECT_EQ(stats.test, 8u);
  auto entries = load_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(entries.size(), 80u);
  std::map<std::string, std::set<std::string>> by_split;
  std::vector<std::string> captions;
  for (const auto& e : entries) {
    by_split[e.split].insert(e.video_id);
    captions.insert(captions.end(), e.captions.begin(), e.captions.end());
  }
  std::size_t total = 0;
  for (const auto& [split, ids] : by_split) total += ids.size();
  EXPECT_EQ(total, 80u);
  auto vocab = build_vocab(captions);
  EXPECT_EQ(vocab.size(), stats.vocabulary);
  for (const auto& c : captions)
    for (int id : vocab.encode(c)) EXPECT_NE(id, kUnkId);
  EXPECT_EQ(read_clip(resolve_clip_path(dir / "manifest.jsonl", entries[5])).pixels,
            generate_clip(SynthSettings{}, 5).clip.pixels);

  const auto again = fresh_dir("corpus_again");
  write_synthetic_corpus(again, SynthSettings{}, 80);
  EXPECT_EQ(slurp(dir / "manifest.jsonl"), slurp(again / "manifest.jsonl"));
  EXPECT_EQ(slurp(dir / "clips" / "clip_00042.evcf"), slurp(again / "clips" / "clip_00042.evcf"));
}
