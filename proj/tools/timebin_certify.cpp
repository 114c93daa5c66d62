// timebin_certify: simulate, analyze and sweep time-bin entanglement data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "timebin/channel_map.hpp"
#include "timebin/parallel.hpp"
#include "timebin/pipeline.hpp"
#include "timebin/sim.hpp"
#include "timebin/timetag.hpp"

namespace fs = std::filesystem;
using namespace timebin;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

struct Options {
  std::string input_a, input_b, channel_map, out;
  std::string format = "json";
  std::string policy = "random";
  Picoseconds delta_t = 540;
  std::vector<Picoseconds> delta_t_list;
  Picoseconds tau_mzi = 2700;
  std::optional<Picoseconds> window;
  double block_seconds = 200.0;
  std::optional<Picoseconds> offset;
  std::uint64_t seed = 0;
  int bootstrap = 0;
  OffsetParams offset_params;
  SourceModel model;
};

void emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    std::cout.flush();
    return;
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

FrameConfig frame_config(const Options& o) {
  FrameConfig f;
  f.delta_t = o.delta_t;
  f.tau_mzi = o.tau_mzi;
  f.window = o.window.value_or(4 * o.tau_mzi);
  f.policy = o.policy == "discard" ? MultiClickPolicy::DiscardFrame : MultiClickPolicy::RandomOutcome;
  f.seed = o.seed;
  f.validate();
  return f;
}

ChannelMap load_channels(const Options& o) {
  if (o.channel_map.empty()) return ChannelMap::standard();
  const auto bytes = read_file_bytes(o.channel_map);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidChannelMap, std::string("channel map: ") + e.what());
  }
  return ChannelMap::from_json(j);
}

AnalysisConfig analysis_config(const Options& o, std::vector<Picoseconds> delta_ts) {
  if (!(o.block_seconds > 0.0)) throw Error(Errc::InvalidConfig, "--block-seconds must be > 0");
  AnalysisConfig cfg;
  cfg.frame = frame_config(o);
  cfg.delta_ts = std::move(delta_ts);
  cfg.block_len = static_cast<Picoseconds>(o.block_seconds * static_cast<double>(kPicosecondsPerSecond));
  cfg.offset = o.offset;
  cfg.offset_params = o.offset_params;
  cfg.bootstrap_resamples = o.bootstrap;
  cfg.threads = default_thread_count();
  cfg.validate();
  return cfg;
}

int run_simulate(const Options& o) {
  if (o.out.empty()) throw Error(Errc::InvalidConfig, "simulate requires --out DIR");
  FrameConfig frame = frame_config(o);
  SourceModel model = o.model;
  model.tau_mzi = o.tau_mzi;
  model.seed = o.seed;
  model.validate();
  const auto streams = generate_streams(model, frame, default_thread_count());

  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw Error(Errc::Io, "cannot create " + o.out + ": " + ec.message());
  const fs::path dir = o.out;
  write_ttag_file(dir / "alice.ttag", streams.a, 8);
  write_ttag_file(dir / "bob.ttag", streams.b, 8);
  emit(streams.channels.to_json().dump(2) + "\n", (dir / "channels.json").string());
  json manifest = {{"model", model.to_json()},
                   {"frame", frame.to_json()},
                   {"files", {{"a", "alice.ttag"}, {"b", "bob.ttag"}, {"channel_map", "channels.json"}}},
                   {"events", {{"a", streams.a.size()}, {"b", streams.b.size()}}},
                   {"ground_truth_fidelity", round_significant(ground_truth_fidelity(model))}};
  emit(manifest.dump(2) + "\n", (dir / "manifest.json").string());
  return kExitOk;
}

struct Inputs {
  std::vector<DetectionEvent> a, b;
  ChannelMap channels;
};

Inputs load_inputs(const Options& o) {
  if (o.input_a.empty() || o.input_b.empty()) throw Error(Errc::InvalidConfig, "--input-a and --input-b are required");
  Inputs in;
  in.channels = load_channels(o);
  in.channels.validate();
  const unsigned threads = default_thread_count();
  in.a = read_ttag_file(o.input_a, threads);
  in.b = read_ttag_file(o.input_b, threads);
  return in;
}

json records_json(const std::vector<std::vector<Certificate>>& rows) {
  json arr = json::array();
  for (const auto& row : rows)
    for (const auto& c : row) arr.push_back(certificate_to_json(c));
  return arr;
}

int run_analyze(const Options& o) {
  const auto cfg = analysis_config(o, {o.delta_t});
  const auto in = load_inputs(o);
  const auto rows = analyze_streams(in.a, in.b, in.channels, cfg);
  if (o.format == "csv") {
    std::vector<Certificate> flat;
    for (const auto& row : rows) flat.insert(flat.end(), row.begin(), row.end());
    emit(summary_csv(flat), o.out);
  } else {
    emit(records_json(rows).dump(2) + "\n", o.out);
  }
  return kExitOk;
}

int run_sweep(const Options& o) {
  if (o.delta_t_list.empty()) throw Error(Errc::InvalidConfig, "sweep requires --delta-t-list");
  const auto cfg = analysis_config(o, o.delta_t_list);
  const auto in = load_inputs(o);
  const auto rows = analyze_streams(in.a, in.b, in.channels, cfg);
  if (o.format == "csv")
    emit(sweep_csv(rows, cfg.delta_ts), o.out);
  else
    emit(records_json(rows).dump(2) + "\n", o.out);
  return kExitOk;
}

int run_offset(const Options& o) {
  const auto in = load_inputs(o);
  json j;
  try {
    const auto est = estimate_offset(in.a, in.b, o.offset_params);
    j = {{"offset_ps", est.offset},
         {"peak_count", est.peak_count},
         {"background_mean", round_significant(est.background_mean)},
         {"background_sd", round_significant(est.background_sd)},
         {"hist_bin_ps", o.offset_params.hist_bin},
         {"bins", est.bins},
         {"error", nullptr}};
  } catch (const Error& e) {
    if (e.code() != Errc::NoPeak) throw;
    j = {{"offset_ps", nullptr}, {"error", e.what()}};
  }
  if (o.format == "csv") {
    std::string csv = "offset_ps,peak_count,background_mean,background_sd,error\r\n";
    if (j["offset_ps"].is_null())
      csv += ",,,," + csv_field(j["error"].get<std::string>()) + "\r\n";
    else
      csv += std::to_string(j["offset_ps"].get<Picoseconds>()) + "," + std::to_string(j["peak_count"].get<std::uint64_t>()) +
             "," + format_number(j["background_mean"].get<double>()) + "," +
             format_number(j["background_sd"].get<double>()) + ",\r\n";
    emit(csv, o.out);
  } else {
    emit(j.dump(2) + "\n", o.out);
  }
  return kExitOk;
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::Io:
    case Errc::MalformedHeader:
    case Errc::TruncatedRecord:
    case Errc::NonMonotonicTimestamp:
    case Errc::InvalidRecord:
      return kExitIo;
    default:
      return kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Certify time-bin entanglement dimensionality from time-tag streams"};
  app.require_subcommand(1);
  Options o;

  auto add_frame = [&](CLI::App* sub) {
    sub->add_option("--tau-mzi", o.tau_mzi, "Interferometer delay (ps)")->capture_default_str();
    sub->add_option("--window", o.window, "Coincidence window (ps), default 4*tau");
    sub->add_option("--policy", o.policy, "Multi-click policy")
        ->check(CLI::IsMember({"random", "discard"}))
        ->capture_default_str();
    sub->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
  };
  auto add_inputs = [&](CLI::App* sub) {
    sub->add_option("--input-a", o.input_a, "Party A TTAG file")->required();
    sub->add_option("--input-b", o.input_b, "Party B TTAG file")->required();
    sub->add_option("--channel-map", o.channel_map, "Channel map JSON (default: standard 8-channel layout)");
    sub->add_option("--out", o.out, "Output file (default: stdout)");
    sub->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
    sub->add_option("--search-half-width", o.offset_params.search_half_width, "Offset search half width (ps)")
        ->capture_default_str();
    sub->add_option("--hist-bin", o.offset_params.hist_bin, "Offset histogram bin (ps)")->capture_default_str();
    sub->add_option("--decimate", o.offset_params.decimation, "Use every k-th A event for offset search")
        ->capture_default_str();
  };
  auto add_analysis = [&](CLI::App* sub) {
    add_inputs(sub);
    add_frame(sub);
    sub->add_option("--block-seconds", o.block_seconds, "Block length (s)")->capture_default_str();
    sub->add_option("--offset", o.offset, "Clock offset override (ps)");
    sub->add_option("--bootstrap", o.bootstrap, "Bootstrap resamples for stderr (0 = off)")->capture_default_str();
  };

  auto* simulate = app.add_subcommand("simulate", "Generate synthetic TTAG streams");
  add_frame(simulate);
  simulate->add_option("--delta-t", o.delta_t, "Time-bin length (ps), validated against tau")->capture_default_str();
  simulate->add_option("--out", o.out, "Output directory")->required();
  simulate->add_option("--v", o.model.visibility, "Visibility")->capture_default_str();
  simulate->add_option("--pairs-per-s", o.model.pair_rate, "Pair rate (1/s)")->capture_default_str();
  simulate->add_option("--duration", o.model.duration, "Duration (s)")->capture_default_str();
  simulate->add_option("--background", o.model.background_rate, "Background rate per detector (1/s)")
      ->capture_default_str();
  simulate->add_option("--jitter", o.model.jitter_sigma, "Gaussian jitter sigma (ps)")->capture_default_str();
  simulate->add_option("--loss-a", o.model.loss_a, "Loss probability, party A")->capture_default_str();
  simulate->add_option("--loss-b", o.model.loss_b, "Loss probability, party B")->capture_default_str();
  simulate->add_option("--clock-offset", o.model.clock_offset, "Offset added to B timestamps (ps)")
      ->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "Certify each time block");
  add_analysis(analyze);
  analyze->add_option("--delta-t", o.delta_t, "Time-bin length (ps)")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Certify each block for several time-bin lengths");
  add_analysis(sweep);
  sweep->add_option("--delta-t-list", o.delta_t_list, "Time-bin lengths (ps)")->delimiter(',')->required();

  auto* offset = app.add_subcommand("offset", "Estimate the B-A clock offset");
  add_inputs(offset);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (simulate->parsed()) return run_simulate(o);
    if (analyze->parsed()) return run_analyze(o);
    if (sweep->parsed()) return run_sweep(o);
    return run_offset(o);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}
