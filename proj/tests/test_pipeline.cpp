#include <gtest/gtest.h>

#include "timebin/pipeline.hpp"
#include "timebin/sim.hpp"

using namespace timebin;

namespace {

GeneratedStreams simulate(double v, double pairs, double background, double duration, std::uint64_t seed = 1,
                          double jitter = 0.0) {
  SourceModel m;
  m.visibility = v;
  m.pair_rate = pairs;
  m.background_rate = background;
  m.duration = duration;
  m.seed = seed;
  m.jitter_sigma = jitter;
  return generate_streams(m, FrameConfig{}, 4);
}

std::string dump_all(const std::vector<std::vector<Certificate>>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& row : rows)
    for (const auto& c : row) arr.push_back(certificate_to_json(c));
  return arr.dump();
}

}  // namespace

TEST(Format, TwelveSignificantDigits) {
  EXPECT_EQ(format_number(0.1234567890123456), "0.123456789012");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(-2.5e-9), "-2.5e-09");
  EXPECT_EQ(round_significant(2.0 / 3.0), 0.666666666667);
}

TEST(Format, CsvQuoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
}

TEST(Analyze, IdealDataSingleBlock) {
  const auto s = simulate(1.0, 50000, 0, 2.0);
  AnalysisConfig cfg;
  cfg.delta_ts = {2700};
  const auto rows = analyze_streams(s.a, s.b, s.channels, cfg);
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_EQ(rows[0].size(), 1u);
  const auto& c = rows[0][0];
  ASSERT_TRUE(c.result);
  EXPECT_GE(c.result->schmidt_number, 3);
  EXPECT_EQ(*c.offset_ps, 0);
  const auto j = certificate_to_json(c);
  for (const char* key : {"delta_t_ps", "block_start_ps", "block_len_ps", "p", "L", "F_cf", "F_sdp", "schmidt_number",
                          "stderr", "diagnostics"})
    EXPECT_TRUE(j.contains(key)) << key;
  for (const char* key : {"clamped", "multi_click_count", "discarded_slot0"}) EXPECT_TRUE(j["diagnostics"].contains(key));
  EXPECT_EQ(j["p"].size(), 4u);
  EXPECT_EQ(j["L"].size(), 3u);
}

TEST(Analyze, BlockCountFollowsDuration) {
  const auto s = simulate(1.0, 100, 0, 600.0);
  AnalysisConfig cfg;
  cfg.block_len = 200 * kPicosecondsPerSecond;
  cfg.offset = 0;
  const auto rows = analyze_streams(s.a, s.b, s.channels, cfg);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(rows[k][0].block_start_ps, static_cast<Picoseconds>(k) * cfg.block_len);
}

TEST(Analyze, BackgroundOnlyReportsPerBlockErrors) {
  const auto s = simulate(1.0, 0, 2000, 2.0);
  AnalysisConfig cfg;
  cfg.block_len = kPicosecondsPerSecond;
  const auto rows = analyze_streams(s.a, s.b, s.channels, cfg);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) {
    EXPECT_FALSE(row[0].result);
    EXPECT_NE(row[0].error.find("NoPeak"), std::string::npos);
    const auto j = certificate_to_json(row[0]);
    EXPECT_TRUE(j["F_sdp"].is_null());
    EXPECT_TRUE(j["F_cf"].is_null());
  }
  // With a forced offset the block fails later, for lack of coincidences.
  AnalysisConfig forced = cfg;
  forced.offset = 0;
  forced.frame.window = 10;
  const auto rows2 = analyze_streams(s.a, s.b, s.channels, forced);
  for (const auto& row : rows2) {
    EXPECT_FALSE(row[0].result);
    EXPECT_NE(row[0].error.find("EmptySetting"), std::string::npos);
  }
}

TEST(Analyze, EmptyInputGivesNoBlocks) {
  AnalysisConfig cfg;
  cfg.delta_ts = {540, 2700};
  const auto rows = analyze_streams({}, {}, ChannelMap::standard(), cfg);
  EXPECT_TRUE(rows.empty());
  EXPECT_EQ(sweep_csv(rows, cfg.delta_ts), "block_start_ps,F_sdp_dt540ps,F_sdp_dt2700ps\r\n");
  EXPECT_EQ(summary_csv({}), "block_start_ps,F_cf,F_sdp,schmidt_number,stderr\r\n");
}

TEST(Analyze, ConfigValidation) {
  AnalysisConfig cfg;
  cfg.delta_ts = {540, 500};
  const std::vector<DetectionEvent> a{{1, 0}};
  EXPECT_THROW(analyze_streams(a, a, ChannelMap::standard(), cfg), Error);
  cfg.delta_ts = {};
  EXPECT_THROW(analyze_streams(a, a, ChannelMap::standard(), cfg), Error);
  cfg.delta_ts = {540};
  cfg.block_len = 0;
  EXPECT_THROW(analyze_streams(a, a, ChannelMap::standard(), cfg), Error);
}

TEST(Sweep, SingleDeltaEqualsAnalyze) {
  const auto s = simulate(0.9, 50000, 20000, 2.0, 7, 200);
  AnalysisConfig sweep;
  sweep.block_len = kPicosecondsPerSecond;
  sweep.delta_ts = {2700, 1350, 540, 270};
  sweep.frame.seed = 5;
  const auto all = analyze_streams(s.a, s.b, s.channels, sweep);
  for (std::size_t k = 0; k < sweep.delta_ts.size(); ++k) {
    AnalysisConfig one = sweep;
    one.delta_ts = {sweep.delta_ts[k]};
    const auto single = analyze_streams(s.a, s.b, s.channels, one);
    ASSERT_EQ(single.size(), all.size());
    for (std::size_t b = 0; b < all.size(); ++b)
      EXPECT_EQ(certificate_to_json(single[b][0]).dump(), certificate_to_json(all[b][k]).dump());
  }
  const std::string csv = sweep_csv(all, sweep.delta_ts);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Sweep, DeterministicAcrossThreadCounts) {
  const auto s = simulate(0.8, 50000, 20000, 3.0, 11, 300);
  AnalysisConfig cfg;
  cfg.block_len = kPicosecondsPerSecond;
  cfg.delta_ts = {2700, 540};
  cfg.bootstrap_resamples = 100;
  cfg.threads = 1;
  const auto serial = dump_all(analyze_streams(s.a, s.b, s.channels, cfg));
  cfg.threads = 6;
  EXPECT_EQ(dump_all(analyze_streams(s.a, s.b, s.channels, cfg)), serial);
  cfg.block_len = 10 * kPicosecondsPerSecond;
  cfg.threads = 1;
  const auto one_block = dump_all(analyze_streams(s.a, s.b, s.channels, cfg));
  cfg.threads = 6;
  EXPECT_EQ(dump_all(analyze_streams(s.a, s.b, s.channels, cfg)), one_block);
}

TEST(Sweep, ShorterBinsFilterBackground) {
  // Accidentals comparable to signal at 2700 ps.
  const auto s = simulate(1.0, 10000, 170000, 5.0, 21);
  AnalysisConfig cfg;
  cfg.offset = 0;
  cfg.delta_ts = {2700, 1350, 540};
  const auto rows = analyze_streams(s.a, s.b, s.channels, cfg);
  ASSERT_EQ(rows.size(), 1u);
  const auto& r = rows[0];
  ASSERT_TRUE(r[0].result && r[1].result && r[2].result);
  EXPECT_LT(r[0].result->fidelity_sdp, r[1].result->fidelity_sdp);
  EXPECT_LT(r[1].result->fidelity_sdp, r[2].result->fidelity_sdp);
}
