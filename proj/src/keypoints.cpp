#include "aggpose/keypoints.hpp"

#include <stdexcept>

namespace aggpose {

void KeypointSchema::validate() const {
  const auto n = keypoint_names.size();
  if (n == 0) throw std::invalid_argument("schema '" + name + "': no keypoints");
  if (k.size() != n) throw std::invalid_argument("schema '" + name + "': k has wrong length");
  for (double v : k) {
    if (!(v > 0.0)) throw std::invalid_argument("schema '" + name + "': k_i must be positive");
  }
  std::vector<int> seen(n, 0);
  for (const auto& [a, b] : flip_pairs) {
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n || a == b) {
      throw std::invalid_argument("schema '" + name + "': invalid flip pair");
    }
    if (++seen[static_cast<std::size_t>(a)] > 1 || ++seen[static_cast<std::size_t>(b)] > 1) {
      throw std::invalid_argument("schema '" + name + "': keypoint appears in more than one flip pair");
    }
  }
  for (const auto& [a, b] : skeleton) {
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
      throw std::invalid_argument("schema '" + name + "': invalid skeleton edge");
    }
  }
}

std::vector<int> KeypointSchema::flip_permutation() const {
  std::vector<int> perm(keypoint_names.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  for (const auto& [a, b] : flip_pairs) {
    perm[static_cast<std::size_t>(a)] = b;
    perm[static_cast<std::size_t>(b)] = a;
  }
  return perm;
}

int KeypointSchema::index_of(const std::string& keypoint) const {
  for (std::size_t i = 0; i < keypoint_names.size(); ++i) {
    if (keypoint_names[i] == keypoint) return static_cast<int>(i);
  }
  return -1;
}

KeypointSchema KeypointSchema::coco17() {
  KeypointSchema s;
  s.name = "coco";
  s.keypoint_names = {"nose",        "left_eye",       "right_eye",  "left_ear",    "right_ear",   "left_shoulder",
                      "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
                      "right_hip",   "left_knee",      "right_knee", "left_ankle",  "right_ankle"};
  const double sigmas[] = {.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89, .89};
  for (double sigma : sigmas) s.k.push_back(2.0 * sigma / 10.0);
  s.flip_pairs = {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}, {11, 12}, {13, 14}, {15, 16}};
  s.skeleton = {{15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12}, {5, 6}, {5, 7}, {6, 8},
                {7, 9},   {8, 10},  {1, 2},   {0, 1},   {0, 2},   {1, 3},  {2, 4},  {3, 5}, {4, 6}};
  return s;
}

KeypointSchema KeypointSchema::infant21(double k) {
  KeypointSchema s;
  s.name = "infant";
  s.keypoint_names = {"head_top",    "nose",        "neck",       "left_shoulder", "right_shoulder", "left_elbow",
                      "right_elbow", "left_wrist",  "right_wrist", "left_finger",  "right_finger",   "navel",
                      "left_hip",    "right_hip",   "left_knee",  "right_knee",    "left_ankle",     "right_ankle",
                      "left_toe",    "right_toe",   "pelvis"};
  s.k.assign(s.keypoint_names.size(), k);
  s.flip_pairs = {{3, 4}, {5, 6}, {7, 8}, {9, 10}, {12, 13}, {14, 15}, {16, 17}, {18, 19}};
  s.skeleton = {{0, 1},   {1, 2},   {2, 3},   {2, 4},   {3, 5},   {5, 7},   {7, 9},   {4, 6},   {6, 8},
                {8, 10},  {2, 11},  {11, 20}, {20, 12}, {20, 13}, {12, 14}, {14, 16}, {16, 18}, {13, 15},
                {15, 17}, {17, 19}};
  return s;
}

KeypointSchema KeypointSchema::named(const std::string& name) {
  if (name == "coco" || name == "coco17") return coco17();
  if (name == "infant" || name == "infant21") return infant21();
  throw std::invalid_argument("unknown keypoint schema '" + name + "' (expected coco or infant)");
}

int count_labeled(const KeypointSet& kps) {
  int n = 0;
  for (const auto& kp : kps) n += kp.visibility > 0 ? 1 : 0;
  return n;
}

}  // namespace aggpose
