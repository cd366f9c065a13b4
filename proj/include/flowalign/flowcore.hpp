#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowalign/util.hpp"

namespace flowalign {

// Dense row-major matrix, the only linear-algebra container the lab needs.
struct Matrix {
  int rows = 0;
  int cols = 0;
  Vec a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
};

enum class Role { reference, policy };

struct ModelShape {
  int state_dim = 8;     // D
  int cond_dim = 4;      // Dc
  int hidden_width = 64;
  int hidden_layers = 3;
  int time_features = 8;  // sin/cos pairs, must be even

  int input_dim() const { return state_dim + time_features + cond_dim; }
  bool operator==(const ModelShape&) const = default;
};

// One training tuple on the straight interpolation path.
struct FlowSample {
  Vec z0;
  Vec z1;
  double t = 0.0;
  Vec zt;
  Vec v;   // z1 - z0
  Vec c;
  Mask mask;
};

// Low-rank adapter factors for one weight matrix: delta = up * down,
// up is (out x rank), down is (rank x in). down starts at zero so a fresh
// policy coincides with its reference bit for bit.
struct Adapter {
  Matrix up;
  Matrix down;
};

// Dense velocity-field model v(z; t, c). Reference-role instances are frozen:
// every mutating entry point rejects them.
class VelocityField {
 public:
  VelocityField(ModelShape shape, Role role, std::uint64_t init_seed);

  const ModelShape& shape() const { return shape_; }
  Role role() const { return role_; }
  bool has_adapter() const { return adapter_rank_ > 0; }
  int adapter_rank() const { return adapter_rank_; }
  int n_layers() const { return static_cast<int>(weights_.size()); }

  // Frozen copy used as the pretrained prior.
  VelocityField frozen_copy() const;
  // Trainable copy of a reference: same base weights, policy role, optional
  // rank-r adapter on every weight matrix (rank 0 = full fine-tuning).
  VelocityField spawn_policy(int adapter_rank, std::uint64_t seed) const;

  Vec forward(const Vec& z, double t, const Vec& c) const;

  struct ForwardTrace {
    Vec input;
    std::vector<Vec> hidden;  // post-tanh activations per hidden layer
    Vec output;
  };
  ForwardTrace forward_trace(const Vec& z, double t, const Vec& c) const;

  // Accumulates scale * dL/dtheta into grad (layout matches get_trainable)
  // given dL/dy for the traced sample. Hand-derived backpropagation.
  void backward(const ForwardTrace& trace, const Vec& dLdy, Vec& grad, double scale) const;

  int num_trainable() const;
  Vec get_trainable() const;
  void set_trainable(const Vec& theta);

  // Frobenius distance between effective parameters (weights with adapter
  // deltas folded in, plus biases) of two models with equal shapes.
  double deviation_from(const VelocityField& other) const;

  Matrix effective_weight(int layer) const;
  const Vec& bias(int layer) const { return biases_[static_cast<std::size_t>(layer)]; }

  std::uint64_t param_hash() const;

  void save(const std::string& path) const;
  static VelocityField load(const std::string& path);

  friend VelocityField adapter_merge(const VelocityField& model);

 private:
  VelocityField() = default;
  void attach_adapter(int rank, std::uint64_t seed);
  Vec time_encode(double t) const;
  void apply_layer(int layer, const Vec& in, Vec& out) const;
  void require_mutable(const char* op) const;

  ModelShape shape_;
  Role role_ = Role::policy;
  int adapter_rank_ = 0;
  std::vector<Matrix> weights_;
  std::vector<Vec> biases_;
  std::vector<Adapter> adapters_;  // one per layer when adapter_rank_ > 0
};

// --- core operations ---------------------------------------------------

Vec interpolate(const Vec& z0, const Vec& z1, double t);
Vec target_velocity(const Vec& z0, const Vec& z1);

FlowSample make_flow_sample(Vec z0, Vec z1, double t, Vec c, Mask mask);

struct LossGrad {
  double value = 0.0;
  Vec grad;
};

// Mean squared velocity error with exact analytic gradient.
LossGrad fm_loss(const VelocityField& policy, std::span<const FlowSample> batch);

// Value-only variant usable on frozen models (metrics).
double fm_error(const VelocityField& model, std::span<const FlowSample> batch);

// Euler integration of an arbitrary field; t runs 0 -> 1 in n_steps equal
// substeps with left-endpoint velocity evaluation.
using VelocityFn = std::function<Vec(const Vec& z, double t)>;
using VelocityFn2 = std::function<Vec(const Vec& z, double t, const Vec& c)>;
Vec integrate_ode(const VelocityFn& field, Vec z0, int n_steps);

Vec sample_ode(const VelocityField& model, const Vec& z0, const Vec& c, int n_steps);

// Materializes base + up*down; the result has no adapter and identical
// input-output behavior.
VelocityField adapter_merge(const VelocityField& model);

}  // namespace flowalign
