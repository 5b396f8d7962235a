#include "deformcaps/head.hpp"

#include <cmath>
#include <stdexcept>

namespace dcaps {

AblationMode ablation_from_string(const std::string& s) {
  if (s == "deform") return AblationMode::deform;
  if (s == "non-deform" || s == "non_deform") return AblationMode::non_deform;
  if (s == "no-routing" || s == "no_routing") return AblationMode::no_routing;
  throw std::invalid_argument("unknown ablation mode: " + s);
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::deform: return "deform";
    case AblationMode::non_deform: return "non_deform";
    case AblationMode::no_routing: return "no_routing";
  }
  return "?";
}

void HeadConfig::validate() const {
  if (c_i <= 0 || a_i <= 0 || k <= 0 || K <= 0 || a_obj <= 0 || t <= 0 || recon_side <= 0 || stem <= 0) {
    throw std::invalid_argument("HeadConfig fields must be positive");
  }
  if (k % 2 == 0) throw std::invalid_argument("kernel size must be odd");
  if (d != 4) throw std::invalid_argument("the two-stage backbone supports d = 4 only");
  if (image_h % d != 0 || image_w % d != 0) {
    throw std::invalid_argument("image dims must be divisible by d = " + std::to_string(d));
  }
  if ((3 * N()) % t != 0) {
    throw std::invalid_argument("routing reduction t = " + std::to_string(t) + " must divide 3N = " +
                                std::to_string(3 * N()));
  }
}

// ---- ParameterRegistry --------------------------------------------------------

Parameter& ParameterRegistry::add(std::string name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.push_back(Parameter{std::move(name), std::move(value)});
  return items_.back();
}

Parameter& ParameterRegistry::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return items_[it->second];
}

const Parameter& ParameterRegistry::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return items_[it->second];
}

int64_t ParameterRegistry::total_elements() const {
  int64_t n = 0;
  for (const Parameter& p : items_) n += p.value.numel();
  return n;
}

// ---- construction ---------------------------------------------------------------

namespace {

Tensor he_uniform(std::vector<int64_t> shape, int64_t fan_in, Pcg32& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Var form_child_capsules(Tape& t, Var features, int c_i, int a_i) {
  const Tensor& f = t.val(features);
  if (f.rank() != 3) throw std::invalid_argument("features must be [C, H, W]");
  if (f.shape[0] != static_cast<int64_t>(c_i) * a_i) {
    throw std::invalid_argument("feature channels " + std::to_string(f.shape[0]) +
                                " != c_i*a_i = " + std::to_string(c_i * a_i));
  }
  return reshape(t, features, {c_i, a_i, f.shape[1], f.shape[2]});
}

DetectionHead::DetectionHead(const HeadConfig& cfg, AblationMode mode, uint64_t init_seed)
    : cfg_(cfg), mode_(mode) {
  cfg_.validate();
  Pcg32 rng(init_seed, 0x5e);
  const int C = cfg_.channels();

  params_.add("backbone.conv1.w", he_uniform({cfg_.stem, 3, 3, 3}, 3 * 3 * 3, rng));
  params_.add("backbone.conv1.b", Tensor({cfg_.stem}));
  params_.add("backbone.conv2.w", he_uniform({C, cfg_.stem, 3, 3}, static_cast<int64_t>(cfg_.stem) * 9, rng));
  params_.add("backbone.conv2.b", Tensor({C}));

  const int64_t caps_fan_in = static_cast<int64_t>(cfg_.a_i) * cfg_.k * cfg_.k;
  params_.add("caps.obj.kernel",
              he_uniform({1, cfg_.a_obj, cfg_.c_i, cfg_.a_i, cfg_.k, cfg_.k}, caps_fan_in, rng));
  params_.add("caps.cls.kernel",
              he_uniform({1, cfg_.K, cfg_.c_i, cfg_.a_i, cfg_.k, cfg_.k}, caps_fan_in, rng));
  if (mode_ != AblationMode::non_deform) {
    params_.add("caps.obj.offsets", Tensor({1, cfg_.k, cfg_.k, 2}));
    params_.add("caps.cls.offsets", Tensor({1, cfg_.k, cfg_.k, 2}));
  }
  if (mode_ != AblationMode::no_routing) {
    ExcitationWeights ew = make_excitation_weights(cfg_.N(), cfg_.t, rng);
    params_.add("routing.W1", std::move(ew.W1));
    params_.add("routing.W2", std::move(ew.W2));
  }

  params_.add("box.offset.conv1.w", he_uniform({256, C, 3, 3}, static_cast<int64_t>(C) * 9, rng));
  params_.add("box.offset.conv1.b", Tensor({256}));
  params_.add("box.offset.conv2.w", Tensor({2, 256, 1, 1}));
  params_.add("box.offset.conv2.b", Tensor({2}));
  params_.add("box.size.conv1.w", he_uniform({256, C, 3, 3}, static_cast<int64_t>(C) * 9, rng));
  params_.add("box.size.conv1.b", Tensor({256}));
  params_.add("box.size.conv2.w", Tensor({2, 256, 1, 1}));
  params_.add("box.size.conv2.b", Tensor({2}));

  const int n2 = cfg_.recon_side * cfg_.recon_side;
  params_.add("recon.fc1.w", he_uniform({256, cfg_.a_obj}, cfg_.a_obj, rng));
  params_.add("recon.fc1.b", Tensor({256}));
  params_.add("recon.fc2.w", he_uniform({256, 256}, 256, rng));
  params_.add("recon.fc2.b", Tensor({256}));
  params_.add("recon.fc3.w", he_uniform({256, 256}, 256, rng));
  params_.add("recon.fc3.b", Tensor({256}));
  params_.add("recon.fc4.w", he_uniform({n2, 256}, 256, rng));
  params_.add("recon.fc4.b", Tensor({n2}));

  for (size_t i = 0; i < params_.items().size(); ++i) {
    name_to_idx_[params_.items()[i].name] = i;
  }
}

size_t DetectionHead::idx(const std::string& name) const {
  auto it = name_to_idx_.find(name);
  if (it == name_to_idx_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

BoundParams DetectionHead::bind(Tape& t, bool trainable) const {
  BoundParams bp;
  bp.vars.reserve(params_.items().size());
  for (const Parameter& p : params_.items()) {
    bp.vars.push_back(trainable ? t.leaf(p.value) : t.constant(p.value));
  }
  return bp;
}

Var DetectionHead::backbone(Tape& t, const BoundParams& bp, Var image) const {
  const Tensor& img = t.val(image);
  if (img.rank() != 3 || img.shape[0] != 3) throw std::invalid_argument("image must be [3, H, W]");
  if (img.shape[1] % cfg_.d != 0 || img.shape[2] % cfg_.d != 0) {
    throw std::invalid_argument("image dims must be divisible by d = " + std::to_string(cfg_.d));
  }
  Var h = conv2d(t, image, bp.at(idx("backbone.conv1.w")), bp.at(idx("backbone.conv1.b")), 2, 1);
  h = relu(t, h);
  h = conv2d(t, h, bp.at(idx("backbone.conv2.w")), bp.at(idx("backbone.conv2.b")), 2, 1);
  return relu(t, h);
}

std::pair<Var, Var> DetectionHead::box_regression_heads(Tape& t, const BoundParams& bp, Var features) const {
  Var off = conv2d(t, features, bp.at(idx("box.offset.conv1.w")), bp.at(idx("box.offset.conv1.b")), 1, 1);
  off = relu(t, off);
  off = conv2d(t, off, bp.at(idx("box.offset.conv2.w")), bp.at(idx("box.offset.conv2.b")), 1, 0);
  Var sz = conv2d(t, features, bp.at(idx("box.size.conv1.w")), bp.at(idx("box.size.conv1.b")), 1, 1);
  sz = relu(t, sz);
  sz = conv2d(t, sz, bp.at(idx("box.size.conv2.w")), bp.at(idx("box.size.conv2.b")), 1, 0);
  return {off, sz};
}

HeadVars DetectionHead::forward(Tape& t, const BoundParams& bp, Var image) const {
  HeadVars out;
  out.features = backbone(t, bp, image);
  const Tensor& f = t.val(out.features);
  const int64_t gh = f.shape[1], gw = f.shape[2];
  const int64_t P = gh * gw;
  const int N = cfg_.N();

  Var children = form_child_capsules(t, out.features, cfg_.c_i, cfg_.a_i);

  LayerConfig lc_obj{cfg_.c_i, cfg_.a_i, 1, cfg_.a_obj, cfg_.k, static_cast<int>(gh), static_cast<int>(gw), 1};
  LayerConfig lc_cls{cfg_.c_i, cfg_.a_i, 1, cfg_.K, cfg_.k, static_cast<int>(gh), static_cast<int>(gw), 1};

  Var u_obj5, u_cls5;  // [c_i, 1, a, gh, gw]
  if (mode_ == AblationMode::non_deform) {
    u_obj5 = conv_capsule_project(t, children, bp.at(idx("caps.obj.kernel")), lc_obj);
    u_cls5 = conv_capsule_project(t, children, bp.at(idx("caps.cls.kernel")), lc_cls);
  } else {
    u_obj5 = deform_capsule_project(t, children, bp.at(idx("caps.obj.kernel")),
                                    bp.at(idx("caps.obj.offsets")), lc_obj);
    u_cls5 = deform_capsule_project(t, children, bp.at(idx("caps.cls.kernel")),
                                    bp.at(idx("caps.cls.offsets")), lc_cls);
  }
  // [c_i, 1, a, gh, gw] -> [P, N, a]
  Var u_obj3 = reshape(t, u_obj5, {N, cfg_.a_obj, P});
  out.U_obj = permute(t, u_obj3, {2, 0, 1});
  Var u_cls3 = reshape(t, u_cls5, {N, cfg_.K, P});
  out.U_cls = permute(t, u_cls3, {2, 0, 1});

  if (mode_ == AblationMode::no_routing) {
    out.r = t.constant(Tensor::full({P, N}, 1.0 / static_cast<double>(N)));
  } else {
    Var a = squeeze_cosine(t, out.U_obj);
    Var b = squeeze_kl(t, out.U_cls);
    Var c = squeeze_variance(t, out.U_cls, cfg_.literal_variance);
    Var s = concat(t, {a, b, c}, -1);  // [P, 3N]
    out.r = excite(t, s, bp.at(idx("routing.W1")), bp.at(idx("routing.W2")));
  }

  RoutedVars routed = route(t, out.U_obj, out.U_cls, out.r);
  out.v_obj_flat = routed.v_obj;  // [P, a_obj]

  Var v_cls_kp = permute(t, routed.v_cls, {1, 0});  // [K, P]
  out.heatmap = sigmoid(t, reshape(t, v_cls_kp, {cfg_.K, gh, gw}));

  Var v_obj_ap = permute(t, routed.v_obj, {1, 0});  // [a_obj, P]
  out.v_obj_grid = reshape(t, v_obj_ap, {cfg_.a_obj, gh, gw});

  auto [off, sz] = box_regression_heads(t, bp, out.features);
  out.offsets = off;
  out.sizes = sz;
  return out;
}

Var DetectionHead::reconstruct(Tape& t, const BoundParams& bp, Var v_obj) const {
  const Tensor& v = t.val(v_obj);
  const bool single = v.rank() == 1;
  if (single && v.shape[0] != cfg_.a_obj) {
    throw std::invalid_argument("reconstruct expects " + std::to_string(cfg_.a_obj) + " atoms, got " +
                                shape_str(v.shape));
  }
  if (!single && (v.rank() != 2 || v.shape[1] != cfg_.a_obj)) {
    throw std::invalid_argument("reconstruct expects [M, " + std::to_string(cfg_.a_obj) + "], got " +
                                shape_str(v.shape));
  }
  Var x = single ? reshape(t, v_obj, {1, cfg_.a_obj}) : v_obj;
  auto dense = [&](Var in, const char* w, const char* b) {
    Var y = matmul(t, in, permute(t, bp.at(idx(w)), {1, 0}));
    return add(t, y, bp.at(idx(b)));
  };
  Var h = relu(t, dense(x, "recon.fc1.w", "recon.fc1.b"));
  h = relu(t, dense(h, "recon.fc2.w", "recon.fc2.b"));
  h = relu(t, dense(h, "recon.fc3.w", "recon.fc3.b"));
  Var m = sigmoid(t, dense(h, "recon.fc4.w", "recon.fc4.b"));
  const int n = cfg_.recon_side;
  const int64_t M = t.val(m).shape[0];
  if (single) return reshape(t, m, {n, n});
  return reshape(t, m, {M, n, n});
}

HeadOutput DetectionHead::forward_eval(const Tensor& image) const {
  Tape t;
  BoundParams bp = bind(t, /*trainable=*/false);
  Var img = t.constant(image);
  HeadVars hv = forward(t, bp, img);
  return HeadOutput{t.val(hv.heatmap), t.val(hv.v_obj_grid), t.val(hv.offsets), t.val(hv.sizes)};
}

}  // namespace dcaps
