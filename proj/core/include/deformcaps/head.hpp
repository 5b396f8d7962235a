#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deformcaps/autograd.hpp"
#include "deformcaps/capsules.hpp"
#include "deformcaps/geometry.hpp"
#include "deformcaps/routing.hpp"
#include "deformcaps/rng.hpp"

namespace dcaps {

enum class AblationMode { deform, non_deform, no_routing };

AblationMode ablation_from_string(const std::string& s);
std::string to_string(AblationMode m);

struct HeadConfig {
  int c_i = 8;          // child capsule types
  int a_i = 8;          // atoms per child
  int k = 3;            // deformable kernel size
  int K = 3;            // classes (atoms of the class-presence parent)
  int a_obj = 64;       // atoms of the instantiation parent
  int t = 4;            // routing bottleneck reduction
  int recon_side = 28;  // reconstruction resolution
  int image_h = 64, image_w = 64;
  int d = 4;            // backbone downsample (two stride-2 stages)
  int stem = 32;        // first backbone stage channels
  bool literal_variance = false;

  int channels() const { return c_i * a_i; }
  int grid_h() const { return image_h / d; }
  int grid_w() const { return image_w / d; }
  int N() const { return c_i; }
  void validate() const;
};

/// Named learnable tensor; names are unique within a registry.
struct Parameter {
  std::string name;
  Tensor value;
};

class ParameterRegistry {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  int64_t total_elements() const;

 private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, size_t> index_;
};

/// Per-tape leaf Vars for every registered parameter, in registry order.
struct BoundParams {
  std::vector<Var> vars;
  Var at(size_t registry_index) const { return vars[registry_index]; }
};

struct HeadVars {
  Var features;    // [C, gh, gw]
  Var heatmap;     // [K, gh, gw], post-sigmoid
  Var v_obj_grid;  // [a_obj, gh, gw]
  Var v_obj_flat;  // [P, a_obj], rows in row-major grid order
  Var offsets;     // [2, gh, gw]
  Var sizes;       // [2, gh, gw]
  Var r;           // [P, N] routing coefficients (uniform constant in no_routing)
  Var U_obj;       // [P, N, a_obj]
  Var U_cls;       // [P, N, K]
};

struct HeadOutput {
  Tensor heatmap;
  Tensor v_obj_grid;
  Tensor offsets;
  Tensor sizes;
};

/// Splits backbone channels into contiguous capsule types:
/// child type i owns channels [i*a_i, (i+1)*a_i).
Var form_child_capsules(Tape& t, Var features, int c_i, int a_i);

/// SplitCaps detection head over a small two-stage reference backbone.
class DetectionHead {
 public:
  DetectionHead(const HeadConfig& cfg, AblationMode mode, uint64_t init_seed);

  /// Leafs every parameter onto the tape (trainable) or adds them as
  /// constants (inference).
  BoundParams bind(Tape& t, bool trainable = true) const;

  Var backbone(Tape& t, const BoundParams& bp, Var image) const;
  std::pair<Var, Var> box_regression_heads(Tape& t, const BoundParams& bp, Var features) const;
  HeadVars forward(Tape& t, const BoundParams& bp, Var image) const;

  /// v_obj [a_obj] -> [n, n] mask in (0,1), or batched [M, a_obj] -> [M, n, n].
  Var reconstruct(Tape& t, const BoundParams& bp, Var v_obj) const;

  HeadOutput forward_eval(const Tensor& image) const;

  ParameterRegistry& params() { return params_; }
  const ParameterRegistry& params() const { return params_; }
  const HeadConfig& config() const { return cfg_; }
  AblationMode mode() const { return mode_; }

 private:
  size_t idx(const std::string& name) const;

  HeadConfig cfg_;
  AblationMode mode_;
  ParameterRegistry params_;
  std::unordered_map<std::string, size_t> name_to_idx_;
};

}  // namespace dcaps
