#pragma once

// Offline transition datasets: random-walk generation, the split protocol
// (distinct seeds, disjoint digit pools), and a bit-exact container format.
//
// Container layout: u32 LE header length, newline-terminated JSON header,
// then raw payload sections in the order the header declares. Observations
// are stored quantized to u8 (round(255*x)); noise is applied once at
// generation time and baked into the stored pixels.
//
// Trajectories render one observation per timestep; record t holds the
// timestep-t and timestep-t+1 images, so consecutive records share bytes.
// Per-trajectory generators are derived from the split seed via the child
// stream construction in rng.hpp, making every split reproducible from
// (benchmark, seed, noise flag, digit source).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmr/common.hpp"
#include "dwmr/envs.hpp"
#include "dwmr/mnist.hpp"
#include "dwmr/rng.hpp"

namespace dwmr {

struct Dataset {
  std::string benchmark;  // "puzzle" or "iceslider"
  int obs_c = 0, obs_h = 0, obs_w = 0;
  int truth_cells = 0, truth_classes = 0;
  bool noisy = false;
  double noise_std = 0.5;
  uint64_t seed = 0;
  size_t count = 0;
  std::vector<uint8_t> obs, next_obs;      // [count, obs_c*obs_h*obs_w]
  std::vector<uint8_t> action;             // [count]
  std::vector<uint8_t> truth, truth_next;  // [count, truth_cells]

  size_t obs_size() const { return size_t(obs_c) * obs_h * obs_w; }
};

namespace detail {

inline std::vector<uint8_t> quantize_u8(const std::vector<float>& x) {
  std::vector<uint8_t> q(x.size());
  for (size_t i = 0; i < x.size(); ++i) q[i] = uint8_t(std::lround(255.0 * double(x[i])));
  return q;
}

inline void append(std::vector<uint8_t>& dst, const std::vector<uint8_t>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace detail

// random walk of `length` moves from a random solvable start; rejected moves
// are resampled so every record is a real transition
inline void append_puzzle_trajectory(Dataset& ds, int length, Rng& rng, const DigitSource& digits,
                                     bool noisy, double noise_std) {
  PuzzleState state = sample_solvable_state(rng);
  auto render = [&](const PuzzleState& s) {
    std::vector<float> img = render_puzzle(s, digits, rng);
    if (noisy) add_noise(img, rng, noise_std);
    return detail::quantize_u8(img);
  };
  std::vector<uint8_t> cur = render(state);
  for (int t = 0; t < length; ++t) {
    PuzzleState next;
    int a;
    do {
      a = int(rng.uniform_int(kNumActions));
    } while (!puzzle_step(state, a, next));
    std::vector<uint8_t> nxt = render(next);
    detail::append(ds.obs, cur);
    detail::append(ds.next_obs, nxt);
    ds.action.push_back(uint8_t(a));
    detail::append(ds.truth, puzzle_truth(state));
    detail::append(ds.truth_next, puzzle_truth(next));
    ++ds.count;
    state = next;
    cur = std::move(nxt);
  }
}

// 20-action episode on a freshly generated level; blocked slides are
// recorded as null transitions
inline void append_ice_episode(Dataset& ds, int length, Rng& rng, bool noisy, double noise_std) {
  IceBoard board = generate_ice_level(rng);
  auto render = [&](const IceBoard& b) {
    std::vector<float> img = render_ice(b);
    if (noisy) add_noise(img, rng, noise_std);
    return detail::quantize_u8(img);
  };
  std::vector<uint8_t> cur = render(board);
  for (int t = 0; t < length; ++t) {
    const int a = int(rng.uniform_int(kNumActions));
    const IceBoard next = ice_step(board, a);
    std::vector<uint8_t> nxt = render(next);
    detail::append(ds.obs, cur);
    detail::append(ds.next_obs, nxt);
    ds.action.push_back(uint8_t(a));
    detail::append(ds.truth, ice_truth(board));
    detail::append(ds.truth_next, ice_truth(next));
    ++ds.count;
    board = next;
    cur = std::move(nxt);
  }
}

inline constexpr int kIceEpisodeLength = 20;

// one split: trajectories keep coming (generator i seeded as child(seed, i))
// until `size` records exist; the tail trajectory is truncated
inline Dataset build_split(const std::string& benchmark, size_t size, uint64_t seed, bool noisy,
                           double noise_std, const DigitSource* digits, int puzzle_traj_len) {
  Dataset ds;
  ds.benchmark = benchmark;
  ds.noisy = noisy;
  ds.noise_std = noise_std;
  ds.seed = seed;
  if (benchmark == "puzzle") {
    check(digits != nullptr, "puzzle dataset needs a digit source");
    ds.obs_c = 1;
    ds.obs_h = ds.obs_w = kPuzzleImage;
    ds.truth_cells = 9;
    ds.truth_classes = 9;
  } else if (benchmark == "iceslider") {
    ds.obs_c = 3;
    ds.obs_h = ds.obs_w = kIceImage;
    ds.truth_cells = 64;
    ds.truth_classes = 4;
  } else {
    fail(cat("unknown benchmark '", benchmark, "'"));
  }
  for (uint64_t traj = 0; ds.count < size; ++traj) {
    Rng rng = Rng::child(seed, traj);
    if (benchmark == "puzzle")
      append_puzzle_trajectory(ds, puzzle_traj_len, rng, *digits, noisy, noise_std);
    else
      append_ice_episode(ds, kIceEpisodeLength, rng, noisy, noise_std);
  }
  const size_t keep = size;
  ds.obs.resize(keep * ds.obs_size());
  ds.next_obs.resize(keep * ds.obs_size());
  ds.action.resize(keep);
  ds.truth.resize(keep * size_t(ds.truth_cells));
  ds.truth_next.resize(keep * size_t(ds.truth_cells));
  ds.count = keep;
  return ds;
}

struct SplitSet {
  Dataset train, val, test;
};

// split protocol: pairwise-distinct seeds, digit pools partitioned into
// contiguous per-class index ranges proportional to the split sizes
inline SplitSet build_splits(const std::string& benchmark, bool noisy, double noise_std,
                             const std::vector<uint64_t>& seeds, const std::vector<size_t>& sizes,
                             const DigitSource* digits, int puzzle_traj_len) {
  check(seeds.size() == 3 && sizes.size() == 3, "build_splits expects 3 seeds and 3 sizes");
  check(seeds[0] != seeds[1] && seeds[0] != seeds[2] && seeds[1] != seeds[2],
        cat("split seeds must be pairwise distinct, got ", seeds[0], ", ", seeds[1], ", ",
            seeds[2]));
  SplitSet out;
  const double total = double(sizes[0] + sizes[1] + sizes[2]);
  if (benchmark == "puzzle") {
    const double f1 = double(sizes[0]) / total, f2 = double(sizes[0] + sizes[1]) / total;
    const DigitSource dtrain = digits->slice(0.0, f1);
    const DigitSource dval = digits->slice(f1, f2);
    const DigitSource dtest = digits->slice(f2, 1.0);
    out.train = build_split(benchmark, sizes[0], seeds[0], noisy, noise_std, &dtrain,
                            puzzle_traj_len);
    out.val = build_split(benchmark, sizes[1], seeds[1], noisy, noise_std, &dval, puzzle_traj_len);
    out.test =
        build_split(benchmark, sizes[2], seeds[2], noisy, noise_std, &dtest, puzzle_traj_len);
  } else {
    out.train =
        build_split(benchmark, sizes[0], seeds[0], noisy, noise_std, nullptr, puzzle_traj_len);
    out.val = build_split(benchmark, sizes[1], seeds[1], noisy, noise_std, nullptr,
                          puzzle_traj_len);
    out.test =
        build_split(benchmark, sizes[2], seeds[2], noisy, noise_std, nullptr, puzzle_traj_len);
  }
  return out;
}

// ---- container I/O ----

inline void write_dataset(const std::string& path, const Dataset& ds) {
  nlohmann::json header;
  header["format"] = "dwmr-dataset";
  header["version"] = 1;
  header["benchmark"] = ds.benchmark;
  header["count"] = ds.count;
  header["obs_shape"] = {ds.obs_c, ds.obs_h, ds.obs_w};
  header["truth_cells"] = ds.truth_cells;
  header["truth_classes"] = ds.truth_classes;
  header["noisy"] = ds.noisy;
  header["noise_std"] = ds.noise_std;
  header["seed"] = ds.seed;
  header["sections"] = nlohmann::json::array();
  auto declare = [&](const char* name, const std::vector<uint8_t>& v) {
    header["sections"].push_back({{"name", name}, {"dtype", "u8"}, {"size", v.size()}});
  };
  declare("obs", ds.obs);
  declare("action", ds.action);
  declare("next_obs", ds.next_obs);
  declare("truth", ds.truth);
  declare("truth_next", ds.truth_next);

  std::string htext = header.dump();
  htext.push_back('\n');
  std::ofstream os(path, std::ios::binary);
  check(bool(os), cat("dataset: cannot open ", path, " for writing"));
  const uint32_t hlen = uint32_t(htext.size());
  const unsigned char lb[4] = {(unsigned char)(hlen & 0xff), (unsigned char)((hlen >> 8) & 0xff),
                               (unsigned char)((hlen >> 16) & 0xff),
                               (unsigned char)((hlen >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(htext.data(), std::streamsize(htext.size()));
  for (const auto* section : {&ds.obs, &ds.action, &ds.next_obs, &ds.truth, &ds.truth_next})
    os.write(reinterpret_cast<const char*>(section->data()), std::streamsize(section->size()));
  check(bool(os), cat("dataset: write to ", path, " failed"));
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), cat("dataset: cannot open ", path));
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  check(bool(is), cat("dataset: ", path, " shorter than the length prefix"));
  const uint32_t hlen =
      uint32_t(lb[0]) | (uint32_t(lb[1]) << 8) | (uint32_t(lb[2]) << 16) | (uint32_t(lb[3]) << 24);
  std::string htext(hlen, '\0');
  is.read(htext.data(), hlen);
  check(bool(is) && !htext.empty() && htext.back() == '\n',
        cat("dataset: ", path, " header is not newline-terminated"));
  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  check(!header.is_discarded(), cat("dataset: ", path, " header is not valid JSON"));
  check(header.value("format", "") == "dwmr-dataset",
        cat("dataset: ", path, " is not a dwmr-dataset container"));

  Dataset ds;
  ds.benchmark = header.at("benchmark").get<std::string>();
  ds.count = header.at("count").get<size_t>();
  const auto shape = header.at("obs_shape");
  ds.obs_c = shape.at(0).get<int>();
  ds.obs_h = shape.at(1).get<int>();
  ds.obs_w = shape.at(2).get<int>();
  ds.truth_cells = header.at("truth_cells").get<int>();
  ds.truth_classes = header.at("truth_classes").get<int>();
  ds.noisy = header.at("noisy").get<bool>();
  ds.noise_std = header.at("noise_std").get<double>();
  ds.seed = header.at("seed").get<uint64_t>();

  for (const auto& section : header.at("sections")) {
    const std::string name = section.at("name").get<std::string>();
    const size_t size = section.at("size").get<size_t>();
    std::vector<uint8_t>* dst = nullptr;
    if (name == "obs") dst = &ds.obs;
    else if (name == "action") dst = &ds.action;
    else if (name == "next_obs") dst = &ds.next_obs;
    else if (name == "truth") dst = &ds.truth;
    else if (name == "truth_next") dst = &ds.truth_next;
    check(dst != nullptr, cat("dataset: unknown section '", name, "' in ", path));
    dst->resize(size);
    is.read(reinterpret_cast<char*>(dst->data()), std::streamsize(size));
    check(bool(is), cat("dataset: ", path, " truncated in section '", name, "'"));
  }
  check(ds.obs.size() == ds.count * ds.obs_size() && ds.action.size() == ds.count &&
            ds.next_obs.size() == ds.obs.size() &&
            ds.truth.size() == ds.count * size_t(ds.truth_cells) &&
            ds.truth_next.size() == ds.truth.size(),
        cat("dataset: ", path, " header does not match payload sizes"));
  return ds;
}

}  // namespace dwmr
