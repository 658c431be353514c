#pragma once

// Deterministic simulators and pixel renderers for the two benchmarks.
//
// MNIST 8-puzzle: 3x3 sliding-tile grid, tiles {1..8} plus blank 0. Actions
// move the blank; moves that would push it off the grid are rejected.
// Rendered at 88x88 grayscale: 28-px cells separated by 1-px black gutters
// (1+28+1+28+1+28+1 = 88), blank drawn as a black square, tile digits drawn
// from freshly sampled exemplars every render.
//
// IceSlider: 8x8 board of ice/rock/goal cells plus an agent that slides in
// the chosen direction until stopped by a rock or the boundary (the goal
// does not stop motion). Rendered at 64x64 RGB with flat 8x8 patches.
//
// Action index order everywhere: up=0, down=1, left=2, right=3.

#include <array>
#include <cstdint>
#include <queue>
#include <vector>

#include "dwmr/common.hpp"
#include "dwmr/rng.hpp"

namespace dwmr {

enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr int kNumActions = 4;
inline constexpr int kActionDr[4] = {-1, 1, 0, 0};
inline constexpr int kActionDc[4] = {0, 0, -1, 1};

// ---- 8-puzzle ----

struct PuzzleState {
  std::array<int, 9> t{};  // row-major tile ids, 0 = blank

  static PuzzleState goal() {
    PuzzleState s;
    for (int i = 0; i < 8; ++i) s.t[i] = i + 1;
    s.t[8] = 0;
    return s;
  }
  int blank_pos() const {
    for (int i = 0; i < 9; ++i)
      if (t[i] == 0) return i;
    fail("puzzle state has no blank tile");
    return -1;
  }
  bool operator==(const PuzzleState& o) const { return t == o.t; }
};

// blank swaps with the neighbor in the action direction; returns false
// (state untouched) when the blank would leave the grid
inline bool puzzle_step(const PuzzleState& state, int action, PuzzleState& next) {
  const int pos = state.blank_pos();
  const int r = pos / 3 + kActionDr[action];
  const int c = pos % 3 + kActionDc[action];
  if (r < 0 || r > 2 || c < 0 || c > 2) return false;
  next = state;
  std::swap(next.t[pos], next.t[size_t(r) * 3 + c]);
  return true;
}

// reachable from the ordered goal iff the inversion count among tiles 1..8
// (read row-major, blank skipped) is even
inline bool puzzle_is_solvable(const PuzzleState& state) {
  int inv = 0;
  for (int i = 0; i < 9; ++i) {
    if (state.t[i] == 0) continue;
    for (int j = i + 1; j < 9; ++j)
      if (state.t[j] != 0 && state.t[i] > state.t[j]) ++inv;
  }
  return inv % 2 == 0;
}

// uniform over the 9!/2 solvable permutations: shuffle, then if the parity is
// odd swap the first two non-blank tiles (a 2-to-1 map from odd to even)
inline PuzzleState sample_solvable_state(Rng& rng) {
  PuzzleState s;
  std::vector<int> perm{0, 1, 2, 3, 4, 5, 6, 7, 8};
  rng.shuffle(perm);
  for (int i = 0; i < 9; ++i) s.t[i] = perm[i];
  if (!puzzle_is_solvable(s)) {
    int a = -1, b = -1;
    for (int i = 0; i < 9 && b < 0; ++i) {
      if (s.t[i] == 0) continue;
      (a < 0 ? a : b) = i;
    }
    std::swap(s.t[a], s.t[b]);
  }
  return s;
}

// ---- IceSlider ----

enum IceCell : uint8_t { kIce = 0, kRock = 1, kGoal = 2 };
inline constexpr int kIceSize = 8;

struct IceBoard {
  std::array<uint8_t, 64> cells{};  // over IceCell; exactly one kGoal
  int agent_r = 0, agent_c = 0;

  uint8_t cell(int r, int c) const { return cells[size_t(r) * kIceSize + c]; }
  bool operator==(const IceBoard& o) const {
    return cells == o.cells && agent_r == o.agent_r && agent_c == o.agent_c;
  }
};

// slides the agent to the last non-rock cell before the first rock or the
// boundary; cells never change, and a blocked move is a valid null transition
inline IceBoard ice_step(const IceBoard& board, int action) {
  IceBoard next = board;
  int r = board.agent_r, c = board.agent_c;
  for (;;) {
    const int nr = r + kActionDr[action], nc = c + kActionDc[action];
    if (nr < 0 || nr >= kIceSize || nc < 0 || nc >= kIceSize) break;
    if (board.cell(nr, nc) == kRock) break;
    r = nr;
    c = nc;
  }
  next.agent_r = r;
  next.agent_c = c;
  return next;
}

// BFS over stopping positions; true iff the agent can come to rest on the goal
inline bool ice_goal_reachable(const IceBoard& board) {
  int goal = -1;
  for (int i = 0; i < 64; ++i)
    if (board.cells[i] == kGoal) goal = i;
  check(goal >= 0, "ice board has no goal cell");
  std::array<bool, 64> seen{};
  std::queue<int> frontier;
  const int start = board.agent_r * kIceSize + board.agent_c;
  seen[start] = true;
  frontier.push(start);
  while (!frontier.empty()) {
    const int pos = frontier.front();
    frontier.pop();
    if (pos == goal) return true;
    IceBoard b = board;
    b.agent_r = pos / kIceSize;
    b.agent_c = pos % kIceSize;
    for (int a = 0; a < kNumActions; ++a) {
      const IceBoard nb = ice_step(b, a);
      const int np = nb.agent_r * kIceSize + nb.agent_c;
      if (!seen[np]) {
        seen[np] = true;
        frontier.push(np);
      }
    }
  }
  return false;
}

// random rocks over the 6x6 interior at the given density; agent and goal on
// distinct non-rock cells; resampled until the goal is reachable
inline IceBoard generate_ice_level(Rng& rng, double rock_density = 0.2, int max_retries = 1000) {
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    IceBoard b;
    for (int r = 1; r < kIceSize - 1; ++r)
      for (int c = 1; c < kIceSize - 1; ++c)
        if (rng.uniform() < rock_density) b.cells[size_t(r) * kIceSize + c] = kRock;
    std::vector<int> free;
    for (int i = 0; i < 64; ++i)
      if (b.cells[i] != kRock) free.push_back(i);
    if (free.size() < 2) continue;
    const int agent = free[rng.uniform_int(free.size())];
    int goal = agent;
    while (goal == agent) goal = free[rng.uniform_int(free.size())];
    b.cells[goal] = kGoal;
    b.agent_r = agent / kIceSize;
    b.agent_c = agent % kIceSize;
    if (ice_goal_reachable(b)) return b;
  }
  fail(cat("ice level generation failed after ", max_retries, " retries"));
  return {};
}

// ---- truth grids for probing ----

// 9 labels in {0..8}: the tile id of each cell
inline std::vector<uint8_t> puzzle_truth(const PuzzleState& s) {
  std::vector<uint8_t> g(9);
  for (int i = 0; i < 9; ++i) g[i] = uint8_t(s.t[i]);
  return g;
}

enum IceLabel : uint8_t { kLabelIce = 0, kLabelRock = 1, kLabelAgent = 2, kLabelGoal = 3 };

// 64 labels in {ice, rock, agent, goal}; the agent label overrides its cell
inline std::vector<uint8_t> ice_truth(const IceBoard& b) {
  std::vector<uint8_t> g(64);
  for (int i = 0; i < 64; ++i)
    g[i] = b.cells[i] == kRock ? kLabelRock : (b.cells[i] == kGoal ? kLabelGoal : kLabelIce);
  g[size_t(b.agent_r) * kIceSize + b.agent_c] = kLabelAgent;
  return g;
}

// ---- rendering ----

inline constexpr int kPuzzleImage = 88;   // 1+28+1+28+1+28+1
inline constexpr int kIceImage = 64;      // 8 cells x 8 px
inline constexpr int kIcePatch = 8;

// i.i.d. Gaussian pixel noise then clip to [0,1]; std is the default σ=0.5
// reading of the noise level (pass sqrt(level) externally for the variance
// interpretation)
inline void add_noise(std::vector<float>& image, Rng& rng, double stddev = 0.5) {
  for (auto& v : image) {
    double x = double(v) + stddev * rng.normal();
    v = float(x < 0 ? 0 : (x > 1 ? 1 : x));
  }
}

// digit providers hand out a 28x28 exemplar of the requested class (1..8)
// freshly sampled from their pool on every call
struct DigitProvider {
  virtual ~DigitProvider() = default;
  virtual const float* sample(int digit_class, Rng& rng) const = 0;
};

// 88x88 single channel, row-major
inline std::vector<float> render_puzzle(const PuzzleState& s, const DigitProvider& digits,
                                        Rng& rng) {
  std::vector<float> img(size_t(kPuzzleImage) * kPuzzleImage, 0.f);
  for (int cell = 0; cell < 9; ++cell) {
    if (s.t[cell] == 0) continue;  // blank stays black
    const float* glyph = digits.sample(s.t[cell], rng);
    const int r0 = 1 + (cell / 3) * 29, c0 = 1 + (cell % 3) * 29;
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 28; ++x)
        img[size_t(r0 + y) * kPuzzleImage + c0 + x] = glyph[size_t(y) * 28 + x];
  }
  return img;
}

// fixed flat patch colors (rgb)
inline constexpr float kIceColor[3] = {1.f, 1.f, 1.f};
inline constexpr float kRockColor[3] = {0.25f, 0.25f, 0.25f};
inline constexpr float kGoalColor[3] = {0.f, 0.8f, 0.f};
inline constexpr float kAgentColor[3] = {0.9f, 0.f, 0.f};

// 64x64 RGB, channel-major [3,64,64]; the agent patch overlays its cell
inline std::vector<float> render_ice(const IceBoard& b) {
  std::vector<float> img(size_t(3) * kIceImage * kIceImage);
  for (int r = 0; r < kIceSize; ++r)
    for (int c = 0; c < kIceSize; ++c) {
      const float* color = kIceColor;
      if (b.cell(r, c) == kRock) color = kRockColor;
      if (b.cell(r, c) == kGoal) color = kGoalColor;
      if (r == b.agent_r && c == b.agent_c) color = kAgentColor;
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < kIcePatch; ++y)
          for (int x = 0; x < kIcePatch; ++x)
            img[(size_t(ch) * kIceImage + r * kIcePatch + y) * kIceImage + c * kIcePatch + x] =
                color[ch];
    }
  return img;
}

}  // namespace dwmr
